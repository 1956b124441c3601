//! Security games that turn a target model and an evaluation pool into
//! labeled score records.
//!
//! * membership inference: members against natural nonmembers;
//! * fabrication: members against fabricated nonmembers;
//! * detection: gradient-norm detection among samples an inferer calls members;
//! * robust inference: members against a mixture of natural and fabricated
//!   nonmembers, scored with and without gradient-norm weighting.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, LabeledExample};
use crate::defense::{ar_statistic, mfd_detect, robustness_weight, Backend, DetectorRule, RobustWeightConfig};
use crate::error::{Error, Result};
use crate::fabrication::{fabricate_all, FabricationConfig, FabricationResult};
use crate::geometry::{fd_grad_estimate, grad_norm, FdConfig};
use crate::metrics::{roc_curve_labeled, RocCurve, TnrTprCurve};
use crate::mia::{Auditor, StatisticKind};
use crate::nn::Classifier;
use crate::seed;
use crate::split::MembershipSplit;
use crate::train::ShadowEnsemble;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Mi,
    Mfa,
    Mfd,
    Armia,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mi => "mi",
            Self::Mfa => "mfa",
            Self::Mfd => "mfd",
            Self::Armia => "armia",
        }
    }
}

/// One scored query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub member: bool,
    pub fabricated: bool,
    pub statistic_kind: StatisticKind,
    /// Fabrication variant, or `none`.
    pub variant: String,
    pub statistic: f64,
    pub grad_norm: Option<f64>,
    pub grad_norm_fd: Option<f64>,
    pub weight: Option<f64>,
    pub ar_statistic: Option<f64>,
    pub detected_fabricated: Option<bool>,
    pub mahalanobis: Option<f64>,
    pub lid: Option<f64>,
}

impl ScoreRecord {
    fn new(id: &str, member: bool, fabricated: bool, kind: StatisticKind, variant: &str, statistic: f64) -> Self {
        Self {
            sample_id: id.to_string(),
            member,
            fabricated,
            statistic_kind: kind,
            variant: variant.to_string(),
            statistic,
            grad_norm: None,
            grad_norm_fd: None,
            weight: None,
            ar_statistic: None,
            detected_fabricated: None,
            mahalanobis: None,
            lid: None,
        }
    }

    /// The gradient norm from whichever backend filled it, exact first.
    pub fn any_grad_norm(&self) -> Option<f64> {
        self.grad_norm.or(self.grad_norm_fd)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GameOutcome {
    pub records: Vec<ScoreRecord>,
    pub protocol: Protocol,
    pub config: serde_json::Value,
}

/// Composition of the robust-inference challenge pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub fraction_members: f64,
    pub fraction_fabricated: f64,
    pub fraction_nonmembers: f64,
    /// Chance that a nonmember challenge is fabricated.
    pub fabrication_probability: f64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self { fraction_members: 0.5, fraction_fabricated: 0.25, fraction_nonmembers: 0.25, fabrication_probability: 0.5 }
    }
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let f = [self.fraction_members, self.fraction_fabricated, self.fraction_nonmembers];
        if f.iter().any(|v| !(*v >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("mixture fractions {f:?} must be nonnegative and sum to 1")));
        }
        if !(0.0..=1.0).contains(&self.fabrication_probability) {
            return Err(Error::InvalidConfig("fabrication probability must lie in [0, 1]".into()));
        }
        let nonmember = self.fraction_fabricated + self.fraction_nonmembers;
        if nonmember > 0.0 && (self.fraction_fabricated / nonmember - self.fabrication_probability).abs() > 1e-9 {
            return Err(Error::InvalidConfig(
                "fabrication probability must equal fraction_fabricated / (fraction_fabricated + fraction_nonmembers)".into(),
            ));
        }
        Ok(())
    }

    /// `(members, fabricated, natural nonmembers)` for the largest pool that
    /// fits the available members and nonmembers.
    pub fn counts(&self, n_members: usize, n_nonmembers: usize) -> (usize, usize, usize) {
        let nonmember = self.fraction_fabricated + self.fraction_nonmembers;
        let mut total = f64::INFINITY;
        if self.fraction_members > 0.0 {
            total = total.min(n_members as f64 / self.fraction_members);
        }
        if nonmember > 0.0 {
            total = total.min(n_nonmembers as f64 / nonmember);
        }
        let total = (total + 1e-9).floor();
        let m = ((total * self.fraction_members).round() as usize).min(n_members);
        let fab = (total * self.fraction_fabricated).round() as usize;
        let nat = (total as usize).saturating_sub(m + fab).min(n_nonmembers.saturating_sub(fab));
        (m, fab.min(n_nonmembers), nat)
    }
}

/// Members and nonmembers of the evaluation pool.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub members: Vec<LabeledExample>,
    pub nonmembers: Vec<LabeledExample>,
}

impl EvalSet {
    pub fn from_split(dataset: &Dataset, split: &MembershipSplit) -> Result<Self> {
        Ok(Self { members: dataset.select(&split.eval_members)?, nonmembers: dataset.select(&split.eval_nonmembers)? })
    }
}

/// Reference material for ensemble-calibrated statistics.
#[derive(Debug, Clone, Copy)]
pub struct References<'a> {
    pub ensemble: &'a ShadowEnsemble,
    /// Examples pooling the fallback LiRA variance.
    pub calibration: &'a [LabeledExample],
    /// Nonmember population for RMIA.
    pub population: &'a [LabeledExample],
    pub gamma: f64,
}

fn auditor<'a>(target: &'a Classifier, kind: StatisticKind, refs: Option<&References<'a>>) -> Result<Auditor<'a>> {
    match (kind.needs_ensemble(), refs) {
        (false, _) => Ok(Auditor::loss_only(target)),
        (true, None) => Err(Error::MissingEnsemble(kind.as_str())),
        (true, Some(r)) => Auditor::new(target, r.ensemble, r.calibration, r.population, r.gamma),
    }
}

/// Nonmembers perturbed once and reused by every game and statistic.
#[derive(Debug, Clone)]
pub struct FabricatedSet {
    pub config: FabricationConfig,
    /// Perturbed queries, with the original ids and labels.
    pub examples: Vec<LabeledExample>,
    pub results: Vec<FabricationResult>,
}

impl FabricatedSet {
    pub fn generate(target: &Classifier, nonmembers: &[LabeledExample], cfg: &FabricationConfig) -> Result<Self> {
        let results = fabricate_all(target, nonmembers, cfg)?;
        let examples = nonmembers.iter().zip(&results).map(|(e, r)| e.with_pixels(r.x_bar.clone())).collect();
        Ok(Self { config: cfg.clone(), examples, results })
    }

    fn variant(&self) -> String {
        if self.config.adaptive_lambda > 0.0 {
            format!("{}_adaptive", self.config.variant)
        } else {
            self.config.variant.to_string()
        }
    }
}

fn snapshot<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn canonical(mut records: Vec<ScoreRecord>) -> Vec<ScoreRecord> {
    records.sort_by(|a, b| a.sample_id.cmp(&b.sample_id).then(a.fabricated.cmp(&b.fabricated)));
    records
}

/// Members against natural nonmembers, scored on unmodified inputs.
pub fn run_mi_game(
    target: &Classifier,
    eval: &EvalSet,
    kind: StatisticKind,
    refs: Option<&References<'_>>,
) -> Result<GameOutcome> {
    let a = auditor(target, kind, refs)?;
    let mut records = Vec::with_capacity(eval.members.len() + eval.nonmembers.len());
    for (set, member) in [(&eval.members, true), (&eval.nonmembers, false)] {
        for e in set {
            records.push(ScoreRecord::new(&e.id, member, false, kind, "none", a.statistic(kind, e)?));
        }
    }
    Ok(GameOutcome {
        records: canonical(records),
        protocol: Protocol::Mi,
        config: serde_json::json!({ "kind": kind }),
    })
}

/// Members against fabricated nonmembers; every statistic is computed on the
/// perturbed query.
pub fn score_mfa_game(
    target: &Classifier,
    eval: &EvalSet,
    kind: StatisticKind,
    fabricated: &FabricatedSet,
    refs: Option<&References<'_>>,
) -> Result<GameOutcome> {
    let a = auditor(target, kind, refs)?;
    let variant = fabricated.variant();
    let mut records = Vec::with_capacity(eval.members.len() + fabricated.examples.len());
    for e in &eval.members {
        let mut r = ScoreRecord::new(&e.id, true, false, kind, "none", a.statistic(kind, e)?);
        r.grad_norm = Some(grad_norm(target, e)?);
        records.push(r);
    }
    for e in &fabricated.examples {
        let mut r = ScoreRecord::new(&e.id, false, true, kind, &variant, a.statistic(kind, e)?);
        r.grad_norm = Some(grad_norm(target, e)?);
        records.push(r);
    }
    Ok(GameOutcome {
        records: canonical(records),
        protocol: Protocol::Mfa,
        config: serde_json::json!({ "kind": kind, "fabrication": snapshot(&fabricated.config) }),
    })
}

/// Fabricate the nonmember half, then score it.
pub fn run_mfa_game(
    target: &Classifier,
    eval: &EvalSet,
    kind: StatisticKind,
    fab: &FabricationConfig,
    refs: Option<&References<'_>>,
) -> Result<GameOutcome> {
    let set = FabricatedSet::generate(target, &eval.nonmembers, fab)?;
    score_mfa_game(target, eval, kind, &set, refs)
}

/// Threshold admitting at most a fraction `q` of `negatives` under `s > τ`.
pub fn threshold_at_fpr(negatives: &[f64], q: f64) -> f64 {
    let mut v = negatives.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    let k = ((q * v.len() as f64).floor() as usize).min(v.len().saturating_sub(1));
    v[k]
}

fn backend_norm(target: &Classifier, e: &LabeledExample, backend: Backend, fd: &FdConfig) -> Result<f64> {
    match backend {
        Backend::Exact => grad_norm(target, e),
        Backend::FiniteDifference => Ok(fd_grad_estimate(target, e, fd)?.1),
    }
}

/// Fraction of fabricated queries the pre-filter may let through.
pub const PREFILTER_FPR: f64 = 0.10;

/// Gradient-norm detection among the queries a loss-threshold inferer accepts.
///
/// The inferer's threshold is set on the same balanced pool so that 10% of
/// the fabricated queries pass. Records are emitted for accepted queries only.
pub fn score_mfd_game(
    target: &Classifier,
    eval: &EvalSet,
    fabricated: &FabricatedSet,
    detector: &DetectorRule,
    fd: &FdConfig,
) -> Result<GameOutcome> {
    let a = Auditor::loss_only(target);
    let kind = StatisticKind::Loss;
    let members = eval.members.iter().map(|e| a.statistic(kind, e)).collect::<Result<Vec<_>>>()?;
    let fakes = fabricated.examples.iter().map(|e| a.statistic(kind, e)).collect::<Result<Vec<_>>>()?;
    if fakes.is_empty() {
        return Err(Error::EmptySelection);
    }
    let tau = threshold_at_fpr(&fakes, PREFILTER_FPR);
    let variant = fabricated.variant();
    let mut records = Vec::new();
    let pool = eval
        .members
        .iter()
        .zip(&members)
        .map(|(e, s)| (e, *s, false))
        .chain(fabricated.examples.iter().zip(&fakes).map(|(e, s)| (e, *s, true)));
    for (e, s, fab) in pool {
        if s <= tau {
            continue;
        }
        let mut r = ScoreRecord::new(&e.id, !fab, fab, kind, if fab { &variant } else { "none" }, s);
        let g = backend_norm(target, e, detector.backend, fd)?;
        match detector.backend {
            Backend::Exact => r.grad_norm = Some(g),
            Backend::FiniteDifference => r.grad_norm_fd = Some(g),
        }
        r.detected_fabricated = Some(mfd_detect(g, detector));
        records.push(r);
    }
    if records.is_empty() {
        return Err(Error::EmptySelection);
    }
    Ok(GameOutcome {
        records: canonical(records),
        protocol: Protocol::Mfd,
        config: serde_json::json!({
            "detector": snapshot(detector),
            "fd": snapshot(fd),
            "prefilter_fpr": PREFILTER_FPR,
            "prefilter_tau": tau,
            "fabrication": snapshot(&fabricated.config),
        }),
    })
}

pub fn run_mfd_game(
    target: &Classifier,
    eval: &EvalSet,
    fab: &FabricationConfig,
    detector: &DetectorRule,
    fd: &FdConfig,
) -> Result<GameOutcome> {
    let set = FabricatedSet::generate(target, &eval.nonmembers, fab)?;
    score_mfd_game(target, eval, &set, detector, fd)
}

/// Which nonmembers of the pool are challenged naturally and which fabricated.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureDraw {
    pub members: Vec<usize>,
    pub fabricated: Vec<usize>,
    pub natural: Vec<usize>,
}

/// Draw exact mixture counts without replacement.
pub fn draw_mixture(n_members: usize, n_nonmembers: usize, mixture: &MixtureSpec, seed_value: u64) -> Result<MixtureDraw> {
    mixture.validate()?;
    let (m, f, n) = mixture.counts(n_members, n_nonmembers);
    let mut rng = seed::rng(seed_value, "mixture", 0);
    let mut members = sample(&mut rng, n_members, m).into_vec();
    members.sort_unstable();
    let chosen = sample(&mut rng, n_nonmembers, f + n).into_vec();
    let mut fabricated = chosen[..f].to_vec();
    let mut natural = chosen[f..].to_vec();
    fabricated.sort_unstable();
    natural.sort_unstable();
    Ok(MixtureDraw { members, fabricated, natural })
}

/// Members against a mixture of natural and fabricated nonmembers.
///
/// `fabricated.examples` must be aligned with `eval.nonmembers`.
#[allow(clippy::too_many_arguments)]
pub fn score_armia_game(
    target: &Classifier,
    eval: &EvalSet,
    kind: StatisticKind,
    fabricated: &FabricatedSet,
    weight: &RobustWeightConfig,
    mixture: &MixtureSpec,
    backend: Backend,
    fd: &FdConfig,
    refs: Option<&References<'_>>,
    seed_value: u64,
) -> Result<GameOutcome> {
    if fabricated.examples.len() != eval.nonmembers.len() {
        return Err(Error::ShapeMismatch { expected: eval.nonmembers.len(), actual: fabricated.examples.len() });
    }
    weight.validate()?;
    let a = auditor(target, kind, refs)?;
    let draw = draw_mixture(eval.members.len(), eval.nonmembers.len(), mixture, seed_value)?;
    let variant = fabricated.variant();
    let mut queries: Vec<(&LabeledExample, bool, bool)> = Vec::new();
    queries.extend(draw.members.iter().map(|&i| (&eval.members[i], true, false)));
    queries.extend(draw.fabricated.iter().map(|&i| (&fabricated.examples[i], false, true)));
    queries.extend(draw.natural.iter().map(|&i| (&eval.nonmembers[i], false, false)));
    let mut records = Vec::with_capacity(queries.len());
    for (e, member, fab) in queries {
        let s = a.statistic(kind, e)?;
        let mut r = ScoreRecord::new(&e.id, member, fab, kind, if fab { &variant } else { "none" }, s);
        let g = backend_norm(target, e, backend, fd)?;
        match backend {
            Backend::Exact => r.grad_norm = Some(g),
            Backend::FiniteDifference => r.grad_norm_fd = Some(g),
        }
        r.weight = Some(robustness_weight(g, weight.lambda));
        r.ar_statistic = Some(ar_statistic(s, g, weight.lambda));
        records.push(r);
    }
    Ok(GameOutcome {
        records: canonical(records),
        protocol: Protocol::Armia,
        config: serde_json::json!({
            "kind": kind,
            "lambda": weight.lambda,
            "mixture": snapshot(mixture),
            "backend": backend,
            "seed": seed_value,
            "fabrication": snapshot(&fabricated.config),
        }),
    })
}

#[allow(clippy::too_many_arguments)]
pub fn run_armia_game(
    target: &Classifier,
    eval: &EvalSet,
    kind: StatisticKind,
    fab: &FabricationConfig,
    weight: &RobustWeightConfig,
    mixture: &MixtureSpec,
    refs: Option<&References<'_>>,
    seed_value: u64,
) -> Result<GameOutcome> {
    let draw = draw_mixture(eval.members.len(), eval.nonmembers.len(), mixture, seed_value)?;
    // Only the drawn nonmembers need perturbing; the rest keep their pixels.
    let picked: Vec<LabeledExample> = draw.fabricated.iter().map(|&i| eval.nonmembers[i].clone()).collect();
    let done = FabricatedSet::generate(target, &picked, fab)?;
    let mut examples = eval.nonmembers.clone();
    let mut results =
        eval.nonmembers.iter().map(|e| FabricationResult::unperturbed(target, e)).collect::<Result<Vec<_>>>()?;
    for (k, &i) in draw.fabricated.iter().enumerate() {
        examples[i] = done.examples[k].clone();
        results[i] = done.results[k].clone();
    }
    let set = FabricatedSet { config: fab.clone(), examples, results };
    score_armia_game(target, eval, kind, &set, weight, mixture, Backend::Exact, &FdConfig::default(), refs, seed_value)
}

/// Recompute weights and weighted statistics for another `λ`.
pub fn reweight(outcome: &GameOutcome, lambda: f64) -> Result<GameOutcome> {
    check_protocol(outcome, Protocol::Armia)?;
    let mut out = outcome.clone();
    for r in &mut out.records {
        let g = r.any_grad_norm().ok_or_else(|| Error::Format(format!("record {} has no gradient norm", r.sample_id)))?;
        r.weight = Some(robustness_weight(g, lambda));
        r.ar_statistic = Some(ar_statistic(r.statistic, g, lambda));
    }
    if let Some(obj) = out.config.as_object_mut() {
        obj.insert("lambda".into(), lambda.into());
    }
    Ok(out)
}

fn check_protocol(outcome: &GameOutcome, expected: Protocol) -> Result<()> {
    if outcome.protocol != expected {
        return Err(Error::ProtocolMismatch { expected: expected.as_str(), actual: outcome.protocol.as_str().into() });
    }
    Ok(())
}

/// Membership ROC: members positive, everything else negative.
pub fn membership_roc(outcome: &GameOutcome) -> Result<RocCurve> {
    let scores: Vec<(f64, bool)> = outcome.records.iter().map(|r| (r.statistic, r.member)).collect();
    roc_curve_labeled(&scores, "member")
}

/// Membership ROC on the weighted statistic of a robust-inference outcome.
pub fn weighted_membership_roc(outcome: &GameOutcome) -> Result<RocCurve> {
    check_protocol(outcome, Protocol::Armia)?;
    let scores = outcome
        .records
        .iter()
        .map(|r| {
            r.ar_statistic
                .map(|s| (s, r.member))
                .ok_or_else(|| Error::Format(format!("record {} has no weighted statistic", r.sample_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    roc_curve_labeled(&scores, "member")
}

/// Detector ROC: fabricated positive, scored by the negated gradient norm.
pub fn detector_roc(outcome: &GameOutcome) -> Result<RocCurve> {
    check_protocol(outcome, Protocol::Mfd)?;
    let scores = outcome
        .records
        .iter()
        .map(|r| {
            r.any_grad_norm()
                .map(|g| (-g, r.fabricated))
                .ok_or_else(|| Error::Format(format!("record {} has no gradient norm", r.sample_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    roc_curve_labeled(&scores, "fabricated")
}

/// TNR over fabricated queries against TPR over true members.
pub fn tnr_tpr_curve(outcome: &GameOutcome) -> Result<TnrTprCurve> {
    check_protocol(outcome, Protocol::Mfa)?;
    Ok(TnrTprCurve::from_roc(&membership_roc(outcome)?))
}

const BASE_COLUMNS: [&str; 6] = ["sample_id", "member", "fabricated", "statistic_kind", "variant", "statistic"];
const OPTIONAL_COLUMNS: [&str; 7] =
    ["grad_norm", "grad_norm_fd", "weight", "ar_statistic", "detected_fabricated", "mahalanobis", "lid"];

fn optional_value(r: &ScoreRecord, column: &str) -> Option<String> {
    let f = |v: Option<f64>| v.map(|x| format!("{x:?}"));
    match column {
        "grad_norm" => f(r.grad_norm),
        "grad_norm_fd" => f(r.grad_norm_fd),
        "weight" => f(r.weight),
        "ar_statistic" => f(r.ar_statistic),
        "detected_fabricated" => r.detected_fabricated.map(|b| u8::from(b).to_string()),
        "mahalanobis" => f(r.mahalanobis),
        "lid" => f(r.lid),
        _ => None,
    }
}

/// Write records as CSV; optional columns appear only when some record fills them.
pub fn write_records_csv(records: &[ScoreRecord], path: &Path) -> Result<()> {
    let present: Vec<&str> =
        OPTIONAL_COLUMNS.into_iter().filter(|c| records.iter().any(|r| optional_value(r, c).is_some())).collect();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(BASE_COLUMNS.iter().chain(present.iter()))?;
    for r in records {
        let mut row = vec![
            r.sample_id.clone(),
            u8::from(r.member).to_string(),
            u8::from(r.fabricated).to_string(),
            r.statistic_kind.to_string(),
            r.variant.clone(),
            format!("{:?}", r.statistic),
        ];
        row.extend(present.iter().map(|c| optional_value(r, c).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_bit(s: &str, row: usize, col: &str) -> Result<bool> {
    match s {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(Error::MalformedRecord { row, reason: format!("{col}: expected 0 or 1, got `{s}`") }),
    }
}

fn parse_f64(s: &str, row: usize, col: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::MalformedRecord { row, reason: format!("{col}: not a number: `{s}`") })
}

/// Read records written by [`write_records_csv`]. Rows are numbered from 1
/// after the header.
pub fn read_records_csv(path: &Path) -> Result<Vec<ScoreRecord>> {
    let mut rd = csv::Reader::from_path(path)?;
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    let col: BTreeMap<&str, usize> = header.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
    for c in BASE_COLUMNS {
        if !col.contains_key(c) {
            return Err(Error::MalformedRecord { row: 0, reason: format!("missing column `{c}`") });
        }
    }
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::MalformedRecord { row, reason: e.to_string() })?;
        let get = |c: &str| col.get(c).and_then(|&k| rec.get(k)).filter(|s| !s.is_empty());
        let req = |c: &str| get(c).ok_or_else(|| Error::MalformedRecord { row, reason: format!("empty `{c}`") });
        let opt = |c: &str| get(c).map(|s| parse_f64(s, row, c)).transpose();
        let kind = req("statistic_kind")?
            .parse::<StatisticKind>()
            .map_err(|e| Error::MalformedRecord { row, reason: e.to_string() })?;
        let r = ScoreRecord {
            sample_id: req("sample_id")?.to_string(),
            member: parse_bit(req("member")?, row, "member")?,
            fabricated: parse_bit(req("fabricated")?, row, "fabricated")?,
            statistic_kind: kind,
            variant: req("variant")?.to_string(),
            statistic: parse_f64(req("statistic")?, row, "statistic")?,
            grad_norm: opt("grad_norm")?,
            grad_norm_fd: opt("grad_norm_fd")?,
            weight: opt("weight")?,
            ar_statistic: opt("ar_statistic")?,
            detected_fabricated: get("detected_fabricated").map(|s| parse_bit(s, row, "detected_fabricated")).transpose()?,
            mahalanobis: opt("mahalanobis")?,
            lid: opt("lid")?,
        };
        if r.fabricated && r.member {
            return Err(Error::MalformedRecord { row, reason: "a fabricated query cannot be a member".into() });
        }
        out.push(r);
    }
    Ok(out)
}

/// Stable hash of a JSON value; object keys are serialized in sorted order.
pub fn config_hash(config: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(config.to_string().as_bytes()))
}

/// Provenance of a persisted game outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeManifest {
    pub protocol: Protocol,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub model_checksum: String,
    pub n_records: usize,
}

/// Persist the records as CSV and a JSON manifest next to it.
pub fn save_outcome(outcome: &GameOutcome, model: &Classifier, seed_value: u64, csv_path: &Path, manifest_path: &Path) -> Result<()> {
    write_records_csv(&outcome.records, csv_path)?;
    let m = OutcomeManifest {
        protocol: outcome.protocol,
        config_hash: config_hash(&outcome.config),
        config: outcome.config.clone(),
        seed: seed_value,
        model_checksum: model.checksum(),
        n_records: outcome.records.len(),
    };
    std::fs::write(manifest_path, serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

pub fn load_outcome(csv_path: &Path, manifest_path: &Path) -> Result<(GameOutcome, OutcomeManifest)> {
    let m: OutcomeManifest = serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    let records = read_records_csv(csv_path)?;
    Ok((GameOutcome { records, protocol: m.protocol, config: m.config.clone() }, m))
}
