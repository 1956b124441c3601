//! Gradient-norm fabrication detection and gradient-weighted membership
//! statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fabrication::FabricationConfig;
use crate::games::{
    score_armia_game, weighted_membership_roc, EvalSet, FabricatedSet, GameOutcome, MixtureSpec, References,
};
use crate::geometry::FdConfig;
use crate::metrics::{auc, tpr_at_fpr};
use crate::mia::StatisticKind;
use crate::nn::Classifier;

/// How input-gradient norms are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Exact,
    FiniteDifference,
}

impl std::str::FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "fd" | "finite_difference" => Ok(Self::FiniteDifference),
            _ => Err(Error::InvalidConfig(format!("unknown gradient backend `{s}`"))),
        }
    }
}

/// Flag a query as fabricated when its gradient norm is at most `tau_prime`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorRule {
    pub tau_prime: f64,
    pub backend: Backend,
}

impl Default for DetectorRule {
    fn default() -> Self {
        Self { tau_prime: 0.0, backend: Backend::Exact }
    }
}

pub fn mfd_detect(g: f64, rule: &DetectorRule) -> bool {
    g <= rule.tau_prime
}

/// Weighting strength and the grid searched during calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustWeightConfig {
    pub lambda: f64,
    pub grid: Vec<f64>,
}

impl Default for RobustWeightConfig {
    fn default() -> Self {
        Self { lambda: 10.0, grid: default_lambda_grid() }
    }
}

/// `{5, 10, …, 35}`.
pub fn default_lambda_grid() -> Vec<f64> {
    (1..=7).map(|k| 5.0 * k as f64).collect()
}

impl RobustWeightConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if self.grid.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::InvalidConfig("lambda grid entries must be > 0".into()));
        }
        Ok(())
    }
}

/// `tanh(λ g)`.
pub fn robustness_weight(g: f64, lambda: f64) -> f64 {
    (lambda * g).tanh()
}

/// `tanh(λ g) · S`.
pub fn ar_statistic(statistic: f64, g: f64, lambda: f64) -> f64 {
    robustness_weight(g, lambda) * statistic
}

/// What calibration maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "q")]
pub enum CalibrationObjective {
    Auc,
    TprAtFpr(f64),
}

impl CalibrationObjective {
    pub fn evaluate(&self, outcome: &GameOutcome) -> Result<f64> {
        let roc = weighted_membership_roc(outcome)?;
        Ok(match *self {
            Self::Auc => auc(&roc),
            Self::TprAtFpr(q) => tpr_at_fpr(&roc, q),
        })
    }
}

/// Grid argmax of `objective`; ties go to the smaller `λ`.
pub fn select_lambda<F>(grid: &[f64], mut objective: F) -> Result<(f64, Vec<(f64, f64)>)>
where
    F: FnMut(f64) -> Result<f64>,
{
    if grid.is_empty() {
        return Err(Error::InvalidConfig("lambda grid is empty".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut scores = Vec::with_capacity(sorted.len());
    let mut best = (sorted[0], f64::NEG_INFINITY);
    for l in sorted {
        let v = objective(l)?;
        if v > best.1 {
            best = (l, v);
        }
        scores.push((l, v));
    }
    Ok((best.0, scores))
}

/// Choose `λ` by simulating the mixed challenge pool on a shadow model whose
/// membership is known. Returns the chosen value and the per-`λ` objective.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_lambda(
    shadow: &Classifier,
    shadow_eval: &EvalSet,
    kind: StatisticKind,
    fab: &FabricationConfig,
    mixture: &MixtureSpec,
    refs: Option<&References<'_>>,
    grid: &[f64],
    objective: CalibrationObjective,
    seed: u64,
) -> Result<(f64, Vec<(f64, f64)>)> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("lambda grid is empty".into()));
    }
    let fabricated = FabricatedSet::generate(shadow, &shadow_eval.nonmembers, fab)?;
    let weight = RobustWeightConfig { lambda: grid[0], grid: grid.to_vec() };
    let base = score_armia_game(
        shadow,
        shadow_eval,
        kind,
        &fabricated,
        &weight,
        mixture,
        Backend::Exact,
        &FdConfig::default(),
        refs,
        seed,
    )?;
    select_lambda(grid, |l| objective.evaluate(&crate::games::reweight(&base, l)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detector_boundary_is_inclusive() {
        let rule = DetectorRule { tau_prime: 0.2, backend: Backend::Exact };
        assert!(mfd_detect(0.0, &rule));
        assert!(mfd_detect(0.2, &rule));
        assert!(!mfd_detect(0.2000001, &rule));
        assert!(mfd_detect(0.0, &DetectorRule::default()));
    }

    #[test]
    fn weight_values() {
        assert_eq!(robustness_weight(0.0, 10.0), 0.0);
        assert!((robustness_weight(0.1, 10.0) - 0.761_594_155_955_764_9).abs() < 1e-15);
        assert!(robustness_weight(1e6, 1e-3) <= 1.0);
        assert!(robustness_weight(50.0, 0.01) < 1.0);
        assert_eq!(ar_statistic(-3.0, 0.0, 10.0), 0.0);
    }

    #[test]
    fn single_element_grid() {
        let (l, _) = select_lambda(&[7.0], |_| Ok(0.3)).unwrap();
        assert_eq!(l, 7.0);
        assert!(select_lambda(&[], |_| Ok(0.0)).is_err());
    }

    #[test]
    fn unimodal_objective_argmax() {
        let grid = default_lambda_grid();
        let f = |l: f64| Ok(-(l - 18.0).powi(2));
        let (l, scores) = select_lambda(&grid, f).unwrap();
        let brute = grid.iter().cloned().max_by(|a, b| f(*a).unwrap().total_cmp(&f(*b).unwrap())).unwrap();
        assert_eq!(l, brute);
        assert_eq!(l, 20.0);
        assert_eq!(scores.len(), 7);
    }

    #[test]
    fn ties_prefer_smaller_lambda() {
        let (l, _) = select_lambda(&[20.0, 5.0, 10.0], |l| Ok(if l > 6.0 { 1.0 } else { 0.0 })).unwrap();
        assert_eq!(l, 10.0);
    }

    #[test]
    fn backend_parsing() {
        assert_eq!("fd".parse::<Backend>().unwrap(), Backend::FiniteDifference);
        assert_eq!("exact".parse::<Backend>().unwrap(), Backend::Exact);
        assert!("gpu".parse::<Backend>().is_err());
    }
}
