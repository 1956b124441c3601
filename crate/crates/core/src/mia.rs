//! Membership-inference test statistics and the threshold decision rule.
//!
//! Every statistic is oriented so that larger values look more like a member,
//! which lets one [`ThresholdRule`] serve all of them.

use serde::{Deserialize, Serialize};

use crate::data::LabeledExample;
use crate::error::{Error, Result};
use crate::nn::{confidence_logit, softmax, Classifier, PROB_FLOOR};
use crate::train::ShadowEnsemble;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatisticKind {
    Loss,
    AttackR,
    Lira,
    Rmia,
}

impl StatisticKind {
    pub const ALL: [StatisticKind; 4] = [Self::Loss, Self::AttackR, Self::Lira, Self::Rmia];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Loss => "loss",
            Self::AttackR => "attack_r",
            Self::Lira => "lira",
            Self::Rmia => "rmia",
        }
    }

    pub fn needs_ensemble(self) -> bool {
        !matches!(self, Self::Loss)
    }
}

impl std::fmt::Display for StatisticKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for StatisticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown statistic `{s}`")))
    }
}

/// Predict "member" when the statistic strictly exceeds `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRule {
    pub tau: f64,
}

pub fn decide_membership(statistic: f64, rule: ThresholdRule) -> bool {
    statistic > rule.tau
}

/// `log p_y(x)`, i.e. the negated (clamped) cross-entropy.
pub fn loss_statistic(model: &Classifier, example: &LabeledExample) -> Result<f64> {
    Ok(-model.sample_loss(example)?)
}

/// `log(p / (1 - p))` with `p` clamped into `[1e-12, 1 - 1e-12]`.
pub fn logit_scale(p: f64) -> f64 {
    let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    (p / (1.0 - p)).ln()
}

/// Logit-scaled confidence of `model` on `example`, computed from logits.
pub fn scaled_confidence(model: &Classifier, example: &LabeledExample) -> Result<f64> {
    if example.y >= model.n_classes {
        return Err(Error::LabelOutOfRange { label: example.y, n_classes: model.n_classes });
    }
    Ok(confidence_logit(&model.logits(&example.x)?, example.y))
}

/// Lower bound on fitted LiRA standard deviations.
pub const SIGMA_FLOOR: f64 = 1e-3;

/// Per-sample IN/OUT counts below this use the ensemble-wide variance.
pub const MIN_PER_SAMPLE_FIT: usize = 4;

/// Gaussian approximations of the logit-scaled confidence under the IN and OUT
/// hypotheses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiraGaussians {
    pub mu_in: f64,
    pub mu_out: f64,
    pub sigma_in: f64,
    pub sigma_out: f64,
    pub per_sample: bool,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Fit both Gaussians by sample mean and standard deviation, flooring the deviations.
pub fn fit_lira_values(in_values: &[f64], out_values: &[f64]) -> Result<LiraGaussians> {
    if in_values.len() < 2 || out_values.len() < 2 {
        return Err(Error::InsufficientModels {
            id: String::new(),
            n_in: in_values.len(),
            n_out: out_values.len(),
        });
    }
    let (mu_in, s_in) = mean_std(in_values);
    let (mu_out, s_out) = mean_std(out_values);
    Ok(LiraGaussians {
        mu_in,
        mu_out,
        sigma_in: s_in.max(SIGMA_FLOOR),
        sigma_out: s_out.max(SIGMA_FLOOR),
        per_sample: true,
    })
}

/// Logit-scaled confidences of the IN and OUT models of `example` (by id), evaluated at its pixels.
pub fn reference_confidences(ensemble: &ShadowEnsemble, example: &LabeledExample) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut ins = Vec::new();
    let mut outs = Vec::new();
    for (m, s) in ensemble.models.iter().zip(&ensemble.manifest) {
        let v = scaled_confidence(m, example)?;
        if s.contains(&example.id) {
            ins.push(v);
        } else {
            outs.push(v);
        }
    }
    Ok((ins, outs))
}

/// Fit per-sample LiRA Gaussians from the shadow ensemble.
pub fn fit_lira(ensemble: &ShadowEnsemble, example: &LabeledExample) -> Result<LiraGaussians> {
    let (ins, outs) = reference_confidences(ensemble, example)?;
    fit_lira_values(&ins, &outs).map_err(|_| Error::InsufficientModels {
        id: example.id.clone(),
        n_in: ins.len(),
        n_out: outs.len(),
    })
}

fn log_normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    -0.5 * ((x - mu) / sigma).powi(2) - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Log likelihood ratio of `phi` under the IN versus OUT Gaussian.
pub fn lira_statistic(g: &LiraGaussians, phi: f64) -> f64 {
    log_normal_pdf(phi, g.mu_in, g.sigma_in) - log_normal_pdf(phi, g.mu_out, g.sigma_out)
}

/// Fraction of reference values strictly below the target value.
pub fn percentile_below(reference: &[f64], target: f64) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyReference("Attack R needs at least one OUT model"));
    }
    Ok(reference.iter().filter(|&&r| r < target).count() as f64 / reference.len() as f64)
}

/// Per-sample calibrated percentile of the target's scaled confidence among OUT models.
pub fn attack_r_statistic(out_models: &[&Classifier], example: &LabeledExample, target: &Classifier) -> Result<f64> {
    let refs = out_models.iter().map(|m| scaled_confidence(m, example)).collect::<Result<Vec<_>>>()?;
    percentile_below(&refs, scaled_confidence(target, example)?)
}

/// Fraction of population ratios `lr_z` with `lr_x / lr_z > gamma`.
pub fn rmia_fraction(lr_x: f64, lr_z: &[f64], gamma: f64) -> Result<f64> {
    if lr_z.is_empty() {
        return Err(Error::EmptyReference("RMIA needs a nonempty population"));
    }
    Ok(lr_z.iter().filter(|&&z| lr_x / z > gamma).count() as f64 / lr_z.len() as f64)
}

fn true_label_prob(model: &Classifier, e: &LabeledExample) -> Result<f64> {
    if e.y >= model.n_classes {
        return Err(Error::LabelOutOfRange { label: e.y, n_classes: model.n_classes });
    }
    Ok(softmax(&model.logits(&e.x)?)[e.y])
}

/// `p_target(u) / mean_ref p_ref(u)` at the true label.
pub fn rmia_likelihood_ratio(refs: &[Classifier], target: &Classifier, u: &LabeledExample) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::EmptyReference("RMIA needs reference models"));
    }
    let mut mean = 0.0;
    for m in refs {
        mean += true_label_prob(m, u)?;
    }
    mean /= refs.len() as f64;
    Ok(true_label_prob(target, u)? / mean.max(PROB_FLOOR))
}

/// Pairwise likelihood-ratio statistic against a population of nonmembers.
pub fn rmia_statistic(
    ensemble: &ShadowEnsemble,
    population: &[LabeledExample],
    example: &LabeledExample,
    target: &Classifier,
    gamma: f64,
) -> Result<f64> {
    if population.is_empty() {
        return Err(Error::EmptyReference("RMIA needs a nonempty population"));
    }
    let lr_z = population
        .iter()
        .map(|z| rmia_likelihood_ratio(&ensemble.models, target, z))
        .collect::<Result<Vec<_>>>()?;
    rmia_fraction(rmia_likelihood_ratio(&ensemble.models, target, example)?, &lr_z, gamma)
}

/// Scores examples against one target with shared, precomputed reference state.
///
/// LiRA uses per-sample standard deviations when an example has at least
/// [`MIN_PER_SAMPLE_FIT`] IN and OUT models, and the pooled within-sample
/// deviation over the calibration examples otherwise.
pub struct Auditor<'a> {
    pub target: &'a Classifier,
    pub ensemble: Option<&'a ShadowEnsemble>,
    global_sigma: Option<(f64, f64)>,
    rmia_population: Vec<f64>,
    pub gamma: f64,
}

impl<'a> Auditor<'a> {
    /// Auditor for reference-free statistics only.
    pub fn loss_only(target: &'a Classifier) -> Self {
        Self { target, ensemble: None, global_sigma: None, rmia_population: Vec::new(), gamma: 1.0 }
    }

    /// `calibration` supplies the pooled LiRA variance; `population` the RMIA z-samples.
    pub fn new(
        target: &'a Classifier,
        ensemble: &'a ShadowEnsemble,
        calibration: &[LabeledExample],
        population: &[LabeledExample],
        gamma: f64,
    ) -> Result<Self> {
        if ensemble.is_empty() {
            return Err(Error::EmptyReference("ensemble has no models"));
        }
        let (mut ss_in, mut n_in, mut ss_out, mut n_out) = (0.0, 0.0, 0.0, 0.0);
        for e in calibration {
            let (ins, outs) = reference_confidences(ensemble, e)?;
            for (vals, ss, n) in [(&ins, &mut ss_in, &mut n_in), (&outs, &mut ss_out, &mut n_out)] {
                if vals.len() > 1 {
                    let (mean, _) = mean_std(vals);
                    *ss += vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
                    *n += (vals.len() - 1) as f64;
                }
            }
        }
        let pooled = |ss: f64, n: f64| if n > 0.0 { (ss / n).sqrt().max(SIGMA_FLOOR) } else { 1.0 };
        let global_sigma = Some((pooled(ss_in, n_in), pooled(ss_out, n_out)));
        let rmia_population = population
            .iter()
            .map(|z| rmia_likelihood_ratio(&ensemble.models, target, z))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { target, ensemble: Some(ensemble), global_sigma, rmia_population, gamma })
    }

    fn ensemble(&self, kind: StatisticKind) -> Result<&'a ShadowEnsemble> {
        self.ensemble.ok_or(Error::MissingEnsemble(kind.as_str()))
    }

    /// LiRA Gaussians for `example` with the variance fallback applied.
    pub fn lira_gaussians(&self, example: &LabeledExample) -> Result<LiraGaussians> {
        let ens = self.ensemble(StatisticKind::Lira)?;
        let (ins, outs) = reference_confidences(ens, example)?;
        if ins.is_empty() || outs.is_empty() {
            return Err(Error::InsufficientModels { id: example.id.clone(), n_in: ins.len(), n_out: outs.len() });
        }
        let (mu_in, s_in) = mean_std(&ins);
        let (mu_out, s_out) = mean_std(&outs);
        let (g_in, g_out) = self.global_sigma.unwrap_or((1.0, 1.0));
        let per_sample = ins.len() >= MIN_PER_SAMPLE_FIT && outs.len() >= MIN_PER_SAMPLE_FIT;
        let (sigma_in, sigma_out) = if per_sample { (s_in, s_out) } else { (g_in, g_out) };
        Ok(LiraGaussians {
            mu_in,
            mu_out,
            sigma_in: sigma_in.max(SIGMA_FLOOR),
            sigma_out: sigma_out.max(SIGMA_FLOOR),
            per_sample,
        })
    }

    pub fn statistic(&self, kind: StatisticKind, example: &LabeledExample) -> Result<f64> {
        match kind {
            StatisticKind::Loss => loss_statistic(self.target, example),
            StatisticKind::AttackR => {
                let outs = self.ensemble(kind)?.out_models(&example.id);
                attack_r_statistic(&outs, example, self.target)
            }
            StatisticKind::Lira => {
                let g = self.lira_gaussians(example)?;
                Ok(lira_statistic(&g, scaled_confidence(self.target, example)?))
            }
            StatisticKind::Rmia => {
                let ens = self.ensemble(kind)?;
                let lr_x = rmia_likelihood_ratio(&ens.models, self.target, example)?;
                rmia_fraction(lr_x, &self.rmia_population, self.gamma)
            }
        }
    }
}
