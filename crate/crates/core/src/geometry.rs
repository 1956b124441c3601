//! Input-gradient norms, feature-space anomaly scores, and the quadratic-model
//! step bound for signed descent.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledExample;
use crate::error::{Error, Result};
use crate::nn::Classifier;
use crate::seed;

/// ℓ2 norm of the exact input gradient of the loss.
pub fn grad_norm(model: &Classifier, example: &LabeledExample) -> Result<f64> {
    Ok(norm2(&model.input_gradient(example)?))
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdConfig {
    pub n_directions: usize,
    pub h: f64,
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self { n_directions: 100, h: 1e-3, seed: 0 }
    }
}

impl FdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_directions == 0 {
            return Err(Error::InvalidConfig("n_directions must be positive".into()));
        }
        if !(self.h > 0.0) {
            return Err(Error::InvalidConfig(format!("finite-difference radius must be > 0, got {}", self.h)));
        }
        Ok(())
    }
}

/// Symmetric finite-difference gradient estimate of `f` at `x` along random
/// unit directions, `(1/N) Σ (f(x+hu) − f(x−hu)) / (2h) · u`.
///
/// `stream` selects an independent direction sequence for the same seed.
pub fn fd_grad_estimate_fn<F>(f: F, x: &[f64], cfg: &FdConfig, stream: u64) -> Result<(Vec<f64>, f64)>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    cfg.validate()?;
    let d = x.len();
    let mut rng = seed::rng(cfg.seed, "fd-directions", stream);
    let mut est = vec![0.0; d];
    let mut u = vec![0.0; d];
    let mut probe = vec![0.0; d];
    for _ in 0..cfg.n_directions {
        for v in u.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let n = norm2(&u);
        if n == 0.0 {
            continue;
        }
        u.iter_mut().for_each(|v| *v /= n);
        for ((p, a), b) in probe.iter_mut().zip(x).zip(&u) {
            *p = a + cfg.h * b;
        }
        let plus = f(&probe)?;
        for ((p, a), b) in probe.iter_mut().zip(x).zip(&u) {
            *p = a - cfg.h * b;
        }
        let minus = f(&probe)?;
        let s = (plus - minus) / (2.0 * cfg.h);
        for (e, b) in est.iter_mut().zip(&u) {
            *e += s * b;
        }
    }
    est.iter_mut().for_each(|v| *v /= cfg.n_directions as f64);
    let norm = norm2(&est);
    Ok((est, norm))
}

/// Black-box gradient estimate of `−log p_y` using only output probabilities.
pub fn fd_grad_estimate(model: &Classifier, example: &LabeledExample, cfg: &FdConfig) -> Result<(Vec<f64>, f64)> {
    if example.y >= model.n_classes {
        return Err(Error::LabelOutOfRange { label: example.y, n_classes: model.n_classes });
    }
    let loss = |x: &[f64]| -> Result<f64> {
        let p = model.probabilities(x)?;
        Ok(-p[example.y].max(crate::nn::PROB_FLOOR).ln())
    };
    fd_grad_estimate_fn(loss, &example.x, cfg, seed::id_key(&example.id))
}

/// Class-conditional Gaussian model of a feature layer plus a reference set
/// for nearest-neighbour queries.
#[derive(Debug, Clone)]
pub struct FeatureStats {
    pub layer_id: String,
    pub class_means: Vec<Vec<f64>>,
    pub shared_covariance: DMatrix<f64>,
    precision: DMatrix<f64>,
    pub knn_reference: Vec<Vec<f64>>,
    pub reference_ids: Vec<String>,
}

/// Only the penultimate layer is exposed by [`Classifier::features`].
pub const PENULTIMATE: &str = "penultimate";

/// Fit feature statistics from precomputed `(id, features, label)` rows.
///
/// With `regularize`, `1e-3 · trace(Σ)/dim` is added to the diagonal.
pub fn fit_from_features(
    rows: &[(String, Vec<f64>, usize)],
    n_classes: usize,
    layer_id: &str,
    regularize: bool,
) -> Result<FeatureStats> {
    if rows.len() < 2 * n_classes {
        return Err(Error::InsufficientData(format!(
            "feature fit needs at least {} samples, got {}",
            2 * n_classes,
            rows.len()
        )));
    }
    let dim = rows[0].1.len();
    let mut sums = vec![vec![0.0; dim]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (_, f, y) in rows {
        if f.len() != dim {
            return Err(Error::ShapeMismatch { expected: dim, actual: f.len() });
        }
        if *y >= n_classes {
            return Err(Error::LabelOutOfRange { label: *y, n_classes });
        }
        counts[*y] += 1;
        for (s, v) in sums[*y].iter_mut().zip(f) {
            *s += v;
        }
    }
    let class_means: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| s.into_iter().map(|v| v / c.max(1) as f64).collect())
        .collect();
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for (_, f, y) in rows {
        let c = DVector::from_iterator(dim, f.iter().zip(&class_means[*y]).map(|(a, b)| a - b));
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= rows.len() as f64;
    if regularize {
        let lambda = 1e-3 * cov.trace() / dim as f64;
        for i in 0..dim {
            cov[(i, i)] += lambda;
        }
    }
    let precision = cov.clone().cholesky().ok_or(Error::SingularCovariance)?.inverse();
    Ok(FeatureStats {
        layer_id: layer_id.to_string(),
        class_means,
        shared_covariance: cov,
        precision,
        knn_reference: rows.iter().map(|r| r.1.clone()).collect(),
        reference_ids: rows.iter().map(|r| r.0.clone()).collect(),
    })
}

/// Fit regularized statistics of the penultimate features of `members`.
pub fn fit_feature_stats(model: &Classifier, members: &[LabeledExample], layer_id: &str) -> Result<FeatureStats> {
    if layer_id != PENULTIMATE {
        return Err(Error::InvalidConfig(format!("unsupported feature layer `{layer_id}`")));
    }
    let rows = members
        .iter()
        .map(|e| Ok((e.id.clone(), model.features(&e.x)?, e.y)))
        .collect::<Result<Vec<_>>>()?;
    fit_from_features(&rows, model.n_classes, layer_id, true)
}

impl FeatureStats {
    /// Minimum squared Mahalanobis distance to a class mean.
    pub fn mahalanobis(&self, f: &[f64]) -> Result<f64> {
        let dim = self.precision.nrows();
        if f.len() != dim {
            return Err(Error::ShapeMismatch { expected: dim, actual: f.len() });
        }
        Ok(self
            .class_means
            .iter()
            .map(|mu| {
                let d = DVector::from_iterator(dim, f.iter().zip(mu).map(|(a, b)| a - b));
                (d.transpose() * &self.precision * &d)[(0, 0)]
            })
            .fold(f64::INFINITY, f64::min))
    }

    /// Maximum-likelihood LID over the `k` nearest reference features, skipping
    /// references whose id equals `exclude`.
    pub fn lid(&self, f: &[f64], k: usize, exclude: Option<&str>) -> Result<f64> {
        let mut d: Vec<f64> = self
            .knn_reference
            .iter()
            .zip(&self.reference_ids)
            .filter(|(_, id)| Some(id.as_str()) != exclude)
            .map(|(r, _)| r.iter().zip(f).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
            .collect();
        if k == 0 || d.len() <= k {
            return Err(Error::InsufficientData(format!("LID needs more than k = {k} references, have {}", d.len())));
        }
        d.select_nth_unstable_by(k - 1, f64::total_cmp);
        d.truncate(k);
        Ok(lid_from_distances(&d))
    }
}

/// `−(1/k Σ log(r_i / r_k))⁻¹` with distances floored at `1e-12` and the mean
/// log ratio floored in magnitude at `1e-12`.
pub fn lid_from_distances(r: &[f64]) -> f64 {
    let rk = r.iter().cloned().fold(0.0, f64::max).max(1e-12);
    let m = r.iter().map(|v| (v.max(1e-12) / rk).ln()).sum::<f64>() / r.len() as f64;
    -1.0 / m.min(-1e-12)
}

pub fn mahalanobis_score(stats: &FeatureStats, model: &Classifier, example: &LabeledExample) -> Result<f64> {
    stats.mahalanobis(&model.features(&example.x)?)
}

/// Default neighbourhood size for LID.
pub const LID_K: usize = 20;

pub fn lid_score(stats: &FeatureStats, model: &Classifier, example: &LabeledExample, k: usize) -> Result<f64> {
    stats.lid(&model.features(&example.x)?, k, Some(&example.id))
}

/// Local quadratic model of the loss: gradient `g` and symmetric Hessian `h`.
#[derive(Debug, Clone)]
pub struct TaylorProbe {
    pub g: DVector<f64>,
    pub h: DMatrix<f64>,
}

impl TaylorProbe {
    /// Symmetrizes `h` when it is asymmetric beyond `1e-8`.
    pub fn new(g: DVector<f64>, h: DMatrix<f64>) -> Result<Self> {
        if h.nrows() != g.len() || h.ncols() != g.len() {
            return Err(Error::ShapeMismatch { expected: g.len(), actual: h.nrows() });
        }
        let asym = (&h - h.transpose()).amax();
        let h = if asym > 1e-8 { (&h + h.transpose()) * 0.5 } else { h };
        Ok(Self { g, h })
    }

    /// Probe from a classifier's exact gradient and finite-difference Hessian.
    pub fn from_model(model: &Classifier, example: &LabeledExample, h: f64) -> Result<Self> {
        let d = model.input_len();
        let g = DVector::from_vec(model.input_gradient(example)?);
        let hess = DMatrix::from_row_slice(d, d, &model.input_hessian(example, h)?);
        Self::new(g, hess)
    }

    fn sign_g(&self) -> DVector<f64> {
        self.g.map(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 })
    }
}

/// `α* = 2 gᵀH sign(g) / (sign(g)ᵀ H² sign(g))`, with `sign(0) = 0`.
///
/// A nonpositive result means the quadratic model guarantees no decrease.
pub fn taylor_step_bound(probe: &TaylorProbe) -> Result<f64> {
    let s = probe.sign_g();
    let hs = &probe.h * &s;
    let den = hs.dot(&hs);
    if den <= 1e-12 {
        return Err(Error::ZeroCurvature);
    }
    Ok(2.0 * probe.g.dot(&hs) / den)
}

/// `(‖g‖, ‖g − α H sign(g)‖)`: the gradient norm before and after one signed
/// step in the quadratic model.
pub fn verify_gradient_decrease(probe: &TaylorProbe, alpha: f64) -> (f64, f64) {
    let after = &probe.g - (&probe.h * probe.sign_g()) * alpha;
    (probe.g.norm(), after.norm())
}
