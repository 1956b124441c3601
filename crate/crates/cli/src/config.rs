use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use memfab::data::{load_cifar10_dir, synthetic, SyntheticSpec};
use memfab::defense::{default_lambda_grid, Backend, CalibrationObjective};
use memfab::fabrication::{FabricationConfig, Variant};
use memfab::games::MixtureSpec;
use memfab::geometry::FdConfig;
use memfab::mia::StatisticKind;
use memfab::seed::derive;
use memfab::{Activation, ArchSpec, Dataset, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic(SyntheticSpec),
    /// Directory of CIFAR-10 binary batches; `limit` caps the number of images.
    Cifar10 { path: PathBuf, limit: Option<usize> },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self::Synthetic(SyntheticSpec { n_examples: 3000, shape: memfab::Shape::new(1, 8, 8), ..Default::default() })
    }
}

impl DatasetConfig {
    pub fn load(&self) -> Result<Dataset> {
        Ok(match self {
            Self::Synthetic(s) => synthetic(s)?,
            Self::Cifar10 { path, limit } => load_cifar10_dir(path, *limit)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSection {
    pub n_train: usize,
    pub n_eval: usize,
    pub n_shadow: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { n_train: 1000, n_eval: 500, n_shadow: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditSection {
    pub kinds: Vec<StatisticKind>,
    pub gamma: f64,
    /// Population size for the pairwise likelihood-ratio statistic.
    pub population: usize,
}

impl Default for AuditSection {
    fn default() -> Self {
        Self { kinds: StatisticKind::ALL.to_vec(), gamma: 1.0, population: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectSection {
    pub tau_prime: f64,
    pub backend: Backend,
    pub fd: FdConfig,
    /// Also record Mahalanobis and LID feature scores.
    pub feature_baselines: bool,
}

impl Default for DetectSection {
    fn default() -> Self {
        Self { tau_prime: 0.0, backend: Backend::Exact, fd: FdConfig::default(), feature_baselines: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobustSection {
    pub lambda_grid: Vec<f64>,
    pub mixture: MixtureSpec,
    pub objective: CalibrationObjective,
    /// Kinds scored under the mixture; defaults to the audit kinds.
    pub kinds: Option<Vec<StatisticKind>>,
}

impl Default for RobustSection {
    fn default() -> Self {
        Self {
            lambda_grid: default_lambda_grid(),
            mixture: MixtureSpec::default(),
            objective: CalibrationObjective::Auc,
            kinds: None,
        }
    }
}

/// Extra fabrication settings swept for the comparison tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub epsilons: Vec<f64>,
    pub variants: Vec<Variant>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub split: SplitSection,
    pub model: ArchSpec,
    pub train: TrainConfig,
    pub fabrication: FabricationConfig,
    pub sweep: SweepSection,
    pub audit: AuditSection,
    pub detect: DetectSection,
    pub robust: RobustSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            split: SplitSection::default(),
            model: ArchSpec::Cnn { channels: vec![8, 16], hidden: 64, activation: Activation::Tanh },
            train: TrainConfig {
                epochs: 60,
                batch_size: 64,
                learning_rate: 0.05,
                augment: false,
                ..TrainConfig::default()
            },
            fabrication: FabricationConfig::default(),
            sweep: SweepSection::default(),
            audit: AuditSection::default(),
            detect: DetectSection::default(),
            robust: RobustSection::default(),
        }
    }
}

/// Seeds handed to each stage, all derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub split: u64,
    pub target: u64,
    pub shadow: u64,
    pub fabrication: u64,
    pub mixture: u64,
    pub calibration: u64,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let DatasetConfig::Cifar10 { path, .. } = &self.dataset {
            if !path.is_dir() {
                bail!("dataset directory {} does not exist", path.display());
            }
        }
        if self.split.n_shadow > 0 && self.split.n_shadow < 2 {
            bail!("at least two shadow models are needed for reference statistics");
        }
        self.train.validate()?;
        self.fabrication.validate()?;
        self.robust.mixture.validate()?;
        self.detect.fd.validate()?;
        for &eps in &self.sweep.epsilons {
            FabricationConfig { epsilon: eps, ..self.fabrication.clone() }.validate()?;
        }
        if self.robust.lambda_grid.iter().any(|l| !(*l > 0.0)) {
            bail!("lambda grid entries must be positive");
        }
        if self.split.n_shadow == 0 && self.audit.kinds.iter().any(|k| k.needs_ensemble()) {
            bail!("statistics {:?} need shadow models but n_shadow = 0", self.audit.kinds);
        }
        Ok(())
    }

    pub fn seeds(&self) -> StageSeeds {
        let s = |tag| derive(self.seed, tag, 0);
        StageSeeds {
            split: s("split"),
            target: s("target"),
            shadow: s("shadow"),
            fabrication: s("fabrication"),
            mixture: s("mixture"),
            calibration: s("calibration"),
        }
    }

    pub fn robust_kinds(&self) -> Vec<StatisticKind> {
        self.robust.kinds.clone().unwrap_or_else(|| self.audit.kinds.clone())
    }

    /// Fabrication settings for every fabricated set of the run; the first is the
    /// main one used by detection and robust inference.
    pub fn fabrication_grid(&self) -> Vec<FabricationConfig> {
        let base = FabricationConfig { seed: self.seeds().fabrication, ..self.fabrication.clone() };
        let mut out = vec![base.clone()];
        let variants = if self.sweep.variants.is_empty() { vec![base.variant] } else { self.sweep.variants.clone() };
        let eps = if self.sweep.epsilons.is_empty() { vec![base.epsilon] } else { self.sweep.epsilons.clone() };
        for &v in &variants {
            for &e in &eps {
                let c = FabricationConfig { epsilon: e, variant: v, alpha0: e / 4.0, ..base.clone() };
                if !out.contains(&c) {
                    out.push(c);
                }
            }
        }
        out
    }
}

/// File-name tag of a fabrication setting, e.g. `mfa-eps4` for ε = 4/255.
pub fn fabrication_tag(c: &FabricationConfig) -> String {
    let eps = c.epsilon * 255.0;
    let eps = if (eps - eps.round()).abs() < 1e-6 { format!("{}", eps.round() as i64) } else { format!("{eps:.3}") };
    let mut tag = format!("{}-eps{eps}", c.variant);
    if c.adaptive_lambda > 0.0 {
        tag.push_str(&format!("-adv{}", c.adaptive_lambda));
    }
    tag
}
