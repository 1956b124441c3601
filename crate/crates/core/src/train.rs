//! Minibatch SGD training of target and shadow classifiers.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{augment, Dataset, LabeledExample};
use crate::error::{Error, Result};
use crate::nn::{ArchSpec, Classifier};
use crate::seed;
use crate::split::{MembershipSplit, ShadowSplit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_schedule: LrSchedule,
    /// Coefficient of an ℓ1 penalty on all parameters; 0 disables it.
    pub l1_coefficient: f64,
    /// Random flip and padded crop during training.
    pub augment: bool,
    pub crop_padding: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// SGD with momentum 0.9, weight decay 1e-4, batch 128, cosine decay from 0.1 over 100 epochs.
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 128,
            epochs: 100,
            lr_schedule: LrSchedule::Cosine,
            l1_coefficient: 0.0,
            augment: true,
            crop_padding: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.l1_coefficient < 0.0 {
            return bad("weight_decay and l1_coefficient must be nonnegative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        Ok(())
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// A trained model with its per-epoch mean training loss.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Classifier,
    pub epoch_loss: Vec<f64>,
}

/// Train a classifier on `examples` by minibatch SGD with momentum.
///
/// With `epochs = 0` the returned parameters are the initialization.
pub fn train_classifier(
    examples: &[LabeledExample],
    dataset: &Dataset,
    arch: &ArchSpec,
    cfg: &TrainConfig,
) -> Result<Trained> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::InsufficientData("no training examples".into()));
    }
    for e in examples {
        e.validate(dataset.shape, dataset.n_classes)?;
    }
    let mut model = Classifier::new(arch.clone(), dataset.shape, dataset.n_classes, cfg.seed)?;
    let n_params = model.n_params();
    let mut velocity = vec![0.0; n_params];
    let mut grad = vec![0.0; n_params];
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut rng = seed::rng(cfg.seed, "train", 0);
    let mut step = 0usize;
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let e = &examples[i];
                let loss = if cfg.augment {
                    let x = augment(&e.x, dataset.shape, cfg.crop_padding, &mut rng);
                    model.accumulate_param_gradient(&x, e.y, &mut grad)
                } else {
                    model.accumulate_param_gradient(&e.x, e.y, &mut grad)
                };
                loss_sum += loss;
            }
            let lr = cfg.lr_at(step, total);
            let scale = 1.0 / batch.len() as f64;
            for ((p, v), g) in model.params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                let mut d = g * scale + cfg.weight_decay * *p;
                if cfg.l1_coefficient > 0.0 && *p != 0.0 {
                    d += cfg.l1_coefficient * p.signum();
                }
                *v = cfg.momentum * *v + d;
                *p -= lr * *v;
            }
            step += 1;
        }
        let mean = loss_sum / examples.len() as f64;
        if !mean.is_finite() || model.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        epoch_loss.push(mean);
    }
    Ok(Trained { model, epoch_loss })
}

/// Reference models with the manifest of what each one trained on.
#[derive(Debug, Clone)]
pub struct ShadowEnsemble {
    pub models: Vec<Classifier>,
    pub manifest: Vec<ShadowSplit>,
}

impl ShadowEnsemble {
    pub fn new(models: Vec<Classifier>, manifest: Vec<ShadowSplit>) -> Result<Self> {
        if models.len() != manifest.len() {
            return Err(Error::InvalidConfig("one manifest entry per shadow model is required".into()));
        }
        Ok(Self { models, manifest })
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// Models whose training set contains `id`.
    pub fn in_models(&self, id: &str) -> Vec<&Classifier> {
        self.models.iter().zip(&self.manifest).filter(|(_, s)| s.contains(id)).map(|(m, _)| m).collect()
    }

    /// Models whose training set excludes `id`.
    pub fn out_models(&self, id: &str) -> Vec<&Classifier> {
        self.models.iter().zip(&self.manifest).filter(|(_, s)| !s.contains(id)).map(|(m, _)| m).collect()
    }

    /// Ensemble without model `index`.
    pub fn without(&self, index: usize) -> Self {
        fn keep<T: Clone>(v: &[T], index: usize) -> Vec<T> {
            v.iter().enumerate().filter(|(i, _)| *i != index).map(|(_, m)| m.clone()).collect()
        }
        Self { models: keep(&self.models, index), manifest: keep(&self.manifest, index) }
    }
}

/// Seed of shadow model `index` derived from the training seed.
pub fn shadow_seed(base: u64, index: usize) -> u64 {
    seed::derive(base, "shadow-model", index as u64)
}

/// Train the first `count` shadow models of `split`'s manifest.
pub fn train_shadow_ensemble(
    dataset: &Dataset,
    split: &MembershipSplit,
    arch: &ArchSpec,
    cfg: &TrainConfig,
    count: usize,
) -> Result<ShadowEnsemble> {
    if count == 0 {
        return Err(Error::InvalidConfig("shadow ensemble needs at least one model".into()));
    }
    if count > split.shadow_splits.len() {
        return Err(Error::InsufficientData(format!(
            "{count} shadow models requested, manifest has {}",
            split.shadow_splits.len()
        )));
    }
    let manifest: Vec<ShadowSplit> = split.shadow_splits[..count].to_vec();
    let models = manifest
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let examples = dataset.select(&s.in_ids)?;
            let c = TrainConfig { seed: shadow_seed(cfg.seed, i), ..cfg.clone() };
            Ok(train_classifier(&examples, dataset, arch, &c)?.model)
        })
        .collect::<Result<Vec<_>>>()?;
    ShadowEnsemble::new(models, manifest)
}

/// Fraction of `examples` whose argmax prediction equals the label.
pub fn accuracy(model: &Classifier, examples: &[LabeledExample]) -> Result<f64> {
    let mut hits = 0usize;
    for e in examples {
        let z = model.logits(&e.x)?;
        let arg = z.iter().enumerate().fold(0, |b, (i, v)| if *v > z[b] { i } else { b });
        hits += usize::from(arg == e.y);
    }
    Ok(hits as f64 / examples.len().max(1) as f64)
}
