//! Member fabrication: bounded perturbations of nonmembers that raise the
//! model's confidence on their true label.
//!
//! All attacks work in the ℓ∞ ball of radius `epsilon` around the original
//! image intersected with `[0, 1]`, take signed steps, and return the iterate
//! with the lowest cross-entropy seen along the way.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{write_archive, LabeledExample, Shape};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, softmax, Classifier};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Mfa,
    IFgsm,
    IBim,
    IPgd,
    ICw,
    IApgd,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Self::Mfa, Self::IFgsm, Self::IBim, Self::IPgd, Self::ICw, Self::IApgd];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mfa => "mfa",
            Self::IFgsm => "i_fgsm",
            Self::IBim => "i_bim",
            Self::IPgd => "i_pgd",
            Self::ICw => "i_cw",
            Self::IApgd => "i_apgd",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FabricationConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub alpha0: f64,
    pub beta: f64,
    pub variant: Variant,
    pub adaptive_lambda: f64,
    /// Seeds the random start of `i_pgd`.
    pub seed: u64,
}

impl Default for FabricationConfig {
    fn default() -> Self {
        Self::mfa(4.0 / 255.0)
    }
}

impl FabricationConfig {
    /// Momentum cosine-annealed ascent with `N = 100`, `α₀ = ε/4`, `β = 0.75`.
    pub fn mfa(epsilon: f64) -> Self {
        Self { epsilon, steps: 100, alpha0: epsilon / 4.0, beta: 0.75, variant: Variant::Mfa, adaptive_lambda: 0.0, seed: 0 }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self { variant, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be positive".into()));
        }
        if !(self.alpha0 > 0.0 || (self.epsilon == 0.0 && self.alpha0 == 0.0)) {
            return Err(Error::InvalidConfig(format!("alpha0 must be > 0, got {}", self.alpha0)));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::InvalidConfig(format!("beta must lie in [0, 1), got {}", self.beta)));
        }
        if !(self.adaptive_lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("adaptive_lambda must be >= 0, got {}", self.adaptive_lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FabricationResult {
    pub x_bar: Vec<f64>,
    pub delta: Vec<f64>,
    /// Loss at every visited iterate, starting with the original input.
    pub loss_trajectory: Vec<f64>,
    /// ℓ2 input-gradient norm at every visited iterate.
    pub gradnorm_trajectory: Vec<f64>,
    pub iterations_run: usize,
    /// Position of `x_bar` in the trajectories.
    pub best_index: usize,
}

impl FabricationResult {
    /// The trivial result that keeps `example` unchanged.
    pub fn unperturbed(model: &Classifier, example: &LabeledExample) -> Result<Self> {
        check(model, example)?;
        let mut t = Tracker::new(&example.x);
        t.visit(model, example, &example.x)?;
        Ok(t.finish(&example.x))
    }

    pub fn final_loss(&self) -> f64 {
        self.loss_trajectory[self.best_index]
    }

    pub fn final_gradnorm(&self) -> f64 {
        self.gradnorm_trajectory[self.best_index]
    }
}

/// `α₀ (1 + cos(πk/N)) / 2`.
pub fn cosine_step_size(k: usize, n: usize, alpha0: f64) -> f64 {
    if n == 0 {
        return alpha0;
    }
    alpha0 * (1.0 + (std::f64::consts::PI * k as f64 / n as f64).cos()) / 2.0
}

/// Clamp into `[center − ε, center + ε]`, then into `[0, 1]`.
///
/// `c ± ε` can round outward, so the result is nudged toward `center` until
/// `|v − c| ≤ ε` holds as computed.
pub fn project_linf(candidate: &[f64], center: &[f64], epsilon: f64) -> Vec<f64> {
    candidate
        .iter()
        .zip(center)
        .map(|(&v, &c)| {
            let mut v = v.clamp(c - epsilon, c + epsilon).clamp(0.0, 1.0);
            while v - c > epsilon {
                v = v.next_down();
            }
            while c - v > epsilon {
                v = v.next_up();
            }
            v
        })
        .collect()
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn check(model: &Classifier, e: &LabeledExample) -> Result<()> {
    if e.x.len() != model.input_len() {
        return Err(Error::ShapeMismatch { expected: model.input_len(), actual: e.x.len() });
    }
    if e.y >= model.n_classes {
        return Err(Error::LabelOutOfRange { label: e.y, n_classes: model.n_classes });
    }
    Ok(())
}

/// Trajectory bookkeeping with best-loss iterate selection.
struct Tracker {
    losses: Vec<f64>,
    norms: Vec<f64>,
    best: Vec<f64>,
    best_loss: f64,
    best_index: usize,
}

impl Tracker {
    fn new(x0: &[f64]) -> Self {
        Self { losses: Vec::new(), norms: Vec::new(), best: x0.to_vec(), best_loss: f64::INFINITY, best_index: 0 }
    }

    fn visit(&mut self, model: &Classifier, e: &LabeledExample, x: &[f64]) -> Result<Vec<f64>> {
        let (loss, g) = model.loss_and_input_gradient(&e.with_pixels(x.to_vec()))?;
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_index = self.losses.len();
            self.best.copy_from_slice(x);
        }
        self.losses.push(loss);
        self.norms.push(l2(&g));
        Ok(g)
    }

    fn finish(self, x0: &[f64]) -> FabricationResult {
        let delta = self.best.iter().zip(x0).map(|(a, b)| a - b).collect();
        FabricationResult {
            iterations_run: self.losses.len() - 1,
            x_bar: self.best,
            delta,
            loss_trajectory: self.losses,
            gradnorm_trajectory: self.norms,
            best_index: self.best_index,
        }
    }
}

/// Momentum signed descent on the loss with a cosine-decayed step.
pub fn mfa_fabricate(model: &Classifier, example: &LabeledExample, cfg: &FabricationConfig) -> Result<FabricationResult> {
    check(model, example)?;
    let x0 = &example.x;
    let mut x = x0.clone();
    let mut m = vec![0.0; x.len()];
    let mut t = Tracker::new(x0);
    for k in 0..cfg.steps {
        let g = t.visit(model, example, &x)?;
        let a = cosine_step_size(k, cfg.steps, cfg.alpha0);
        for (mi, gi) in m.iter_mut().zip(&g) {
            *mi = cfg.beta * *mi + (1.0 - cfg.beta) * gi;
        }
        let cand: Vec<f64> = x.iter().zip(&m).map(|(xi, mi)| xi - a * sign(*mi)).collect();
        x = project_linf(&cand, x0, cfg.epsilon);
    }
    t.visit(model, example, &x)?;
    Ok(t.finish(x0))
}

fn signed_step(x: &[f64], g: &[f64], a: f64, x0: &[f64], eps: f64) -> Vec<f64> {
    let cand: Vec<f64> = x.iter().zip(g).map(|(xi, gi)| xi - a * sign(*gi)).collect();
    project_linf(&cand, x0, eps)
}

/// Gradient of `z_y − max_{i≠y} z_i` with respect to the input.
fn margin_gradient(model: &Classifier, e: &LabeledExample, x: &[f64]) -> Result<Vec<f64>> {
    let t = model.forward(x)?;
    let z = t.logits();
    let j = (0..z.len()).filter(|&i| i != e.y).fold(None, |b: Option<usize>, i| match b {
        Some(b) if z[b] >= z[i] => Some(b),
        _ => Some(i),
    });
    let mut dz = vec![0.0; z.len()];
    dz[e.y] = 1.0;
    if let Some(j) = j {
        dz[j] = -1.0;
    }
    Ok(model.backward(&t, &dz, None))
}

/// Checkpoints `⌈p_j N⌉` of the halving schedule, `p₀ = 0`, `p₁ = 0.22`.
pub fn apgd_checkpoints(n: usize) -> Vec<usize> {
    let mut p = vec![0.0, 0.22];
    loop {
        let (a, b) = (p[p.len() - 2], p[p.len() - 1]);
        let next: f64 = b + f64::max(b - a - 0.03, 0.06);
        if next > 1.0 {
            break;
        }
        p.push(next);
    }
    let mut w: Vec<usize> = p.iter().map(|v| (v * n as f64 - 1e-9).ceil() as usize).collect();
    w.dedup();
    w
}

fn apgd(model: &Classifier, e: &LabeledExample, cfg: &FabricationConfig) -> Result<FabricationResult> {
    const RHO: f64 = 0.75;
    const MOMENTUM: f64 = 0.75;
    let x0 = &e.x;
    let n = cfg.steps;
    let checkpoints = apgd_checkpoints(n);
    let mut eta = 2.0 * cfg.epsilon;
    let mut t = Tracker::new(x0);
    let mut g = t.visit(model, e, x0)?;
    let mut prev = x0.clone();
    let mut x = signed_step(x0, &g, eta, x0, cfg.epsilon);
    let mut last_loss = t.losses[0];
    let mut successes = 0usize;
    let mut window_start = 0usize;
    let mut eta_at_last = eta;
    let mut best_at_last = t.best_loss;
    let mut next_cp = 1;
    for k in 1..=n {
        g = t.visit(model, e, &x)?;
        let loss = t.losses[k];
        if loss < last_loss {
            successes += 1;
        }
        last_loss = loss;
        if k == n {
            break;
        }
        let mut from = x.clone();
        if next_cp < checkpoints.len() && k == checkpoints[next_cp] {
            let window = k - window_start;
            let stalled = (successes as f64) < RHO * window as f64;
            let flat = eta_at_last == eta && best_at_last == t.best_loss;
            eta_at_last = eta;
            best_at_last = t.best_loss;
            if stalled || flat {
                eta /= 2.0;
                from = t.best.clone();
                g = model.input_gradient(&e.with_pixels(from.clone()))?;
            }
            successes = 0;
            window_start = k;
            next_cp += 1;
        }
        let z = signed_step(&from, &g, eta, x0, cfg.epsilon);
        let cand: Vec<f64> = from
            .iter()
            .zip(&z)
            .zip(&prev)
            .map(|((xi, zi), pi)| xi + MOMENTUM * (zi - xi) + (1.0 - MOMENTUM) * (xi - pi))
            .collect();
        prev = from;
        x = project_linf(&cand, x0, cfg.epsilon);
    }
    Ok(t.finish(x0))
}

/// Inverted adversarial baselines: signed descent on the loss (or ascent on
/// the logit margin for `i_cw`).
pub fn fabricate_baseline(model: &Classifier, example: &LabeledExample, cfg: &FabricationConfig) -> Result<FabricationResult> {
    check(model, example)?;
    let x0 = &example.x;
    let eps = cfg.epsilon;
    match cfg.variant {
        Variant::Mfa => Err(Error::UnknownVariant("mfa is not a baseline".into())),
        Variant::IFgsm => {
            let mut t = Tracker::new(x0);
            let g = t.visit(model, example, x0)?;
            let x1 = signed_step(x0, &g, eps, x0, eps);
            t.visit(model, example, &x1)?;
            Ok(t.finish(x0))
        }
        Variant::IBim | Variant::IPgd | Variant::ICw => {
            let mut x = x0.clone();
            if cfg.variant == Variant::IPgd {
                let mut rng = seed::rng(cfg.seed, "i_pgd-start", seed::id_key(&example.id));
                let cand: Vec<f64> = x0.iter().map(|v| v + rng.gen_range(-1.0..=1.0) * eps).collect();
                x = project_linf(&cand, x0, eps);
            }
            let mut t = Tracker::new(x0);
            let mut updates = cfg.steps;
            if cfg.variant == Variant::IPgd {
                // the random start spends the first step
                t.visit(model, example, x0)?;
                updates -= 1;
            }
            for _ in 0..updates {
                let g = t.visit(model, example, &x)?;
                x = if cfg.variant == Variant::ICw {
                    let gm = margin_gradient(model, example, &x)?;
                    let neg: Vec<f64> = gm.iter().map(|v| -v).collect();
                    signed_step(&x, &neg, cfg.alpha0, x0, eps)
                } else {
                    signed_step(&x, &g, cfg.alpha0, x0, eps)
                };
            }
            t.visit(model, example, &x)?;
            Ok(t.finish(x0))
        }
        Variant::IApgd => apgd(model, example, cfg),
    }
}

/// Finite-difference step used to differentiate the gradient-norm penalty.
pub const PENALTY_FD_STEP: f64 = 1e-3;

/// `p_y(x) − λ‖∇ℓ(x)‖₂` and its input gradient.
pub fn adaptive_objective(model: &Classifier, e: &LabeledExample, lambda: f64) -> Result<(f64, Vec<f64>, f64, f64)> {
    let t = model.forward(&e.x)?;
    let z = t.logits();
    let loss = cross_entropy(z, e.y);
    let p = softmax(z);
    let mut dz = p.clone();
    dz[e.y] -= 1.0;
    let g = model.backward(&t, &dz, None);
    let norm = l2(&g);
    let py = p[e.y];
    // ∇p_y = −p_y ∇ℓ
    let mut grad: Vec<f64> = g.iter().map(|v| -py * v).collect();
    if lambda > 0.0 && norm > 0.0 {
        let u: Vec<f64> = g.iter().map(|v| v / norm).collect();
        let hu = model.hessian_vector_product(e, &u, PENALTY_FD_STEP)?;
        for (gi, hi) in grad.iter_mut().zip(&hu) {
            *gi -= lambda * hi;
        }
    }
    Ok((py - lambda * norm, grad, loss, norm))
}

/// Momentum cosine-annealed ascent on `p_y − λ_adv ‖∇ℓ‖₂`, keeping the iterate
/// with the largest objective.
pub fn adaptive_mfa(model: &Classifier, example: &LabeledExample, cfg: &FabricationConfig) -> Result<FabricationResult> {
    check(model, example)?;
    let lambda = cfg.adaptive_lambda;
    let x0 = &example.x;
    let mut x = x0.clone();
    let mut m = vec![0.0; x.len()];
    let (mut losses, mut norms) = (Vec::new(), Vec::new());
    let mut best = (f64::NEG_INFINITY, 0usize, x0.clone());
    for k in 0..=cfg.steps {
        let (obj, grad, loss, norm) = adaptive_objective(model, &example.with_pixels(x.clone()), lambda)?;
        if obj > best.0 {
            best = (obj, losses.len(), x.clone());
        }
        losses.push(loss);
        norms.push(norm);
        if k == cfg.steps {
            break;
        }
        let a = cosine_step_size(k, cfg.steps, cfg.alpha0);
        for (mi, gi) in m.iter_mut().zip(&grad) {
            *mi = cfg.beta * *mi - (1.0 - cfg.beta) * gi;
        }
        let cand: Vec<f64> = x.iter().zip(&m).map(|(xi, mi)| xi - a * sign(*mi)).collect();
        x = project_linf(&cand, x0, cfg.epsilon);
    }
    let (_, best_index, x_bar) = best;
    let delta = x_bar.iter().zip(x0).map(|(a, b)| a - b).collect();
    Ok(FabricationResult {
        x_bar,
        delta,
        iterations_run: losses.len() - 1,
        loss_trajectory: losses,
        gradnorm_trajectory: norms,
        best_index,
    })
}

/// Run the attack selected by `cfg`: adaptive when `adaptive_lambda > 0`,
/// otherwise the configured variant.
pub fn fabricate(model: &Classifier, example: &LabeledExample, cfg: &FabricationConfig) -> Result<FabricationResult> {
    cfg.validate()?;
    match (cfg.variant, cfg.adaptive_lambda > 0.0) {
        (Variant::Mfa, true) => adaptive_mfa(model, example, cfg),
        (Variant::Mfa, false) => mfa_fabricate(model, example, cfg),
        (_, true) => Err(Error::InvalidConfig("the gradient penalty applies to mfa only".into())),
        _ => fabricate_baseline(model, example, cfg),
    }
}

/// Fabricate every example, in input order.
pub fn fabricate_all(model: &Classifier, examples: &[LabeledExample], cfg: &FabricationConfig) -> Result<Vec<FabricationResult>> {
    examples.par_iter().map(|e| fabricate(model, e, cfg)).collect()
}

/// Write fabricated images as a tensor archive plus a per-sample CSV manifest.
pub fn save_fabricated(
    archive: &Path,
    manifest: &Path,
    shape: Shape,
    n_classes: usize,
    originals: &[LabeledExample],
    results: &[FabricationResult],
    cfg: &FabricationConfig,
) -> Result<()> {
    if originals.len() != results.len() {
        return Err(Error::ShapeMismatch { expected: originals.len(), actual: results.len() });
    }
    let fabricated: Vec<LabeledExample> =
        originals.iter().zip(results).map(|(e, r)| e.with_pixels(r.x_bar.clone())).collect();
    write_archive(archive, shape, n_classes, &fabricated)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(manifest)?);
    writeln!(w, "sample_id,variant,epsilon,steps,final_loss,final_gradnorm")?;
    for (e, r) in originals.iter().zip(results) {
        writeln!(w, "{},{},{},{},{},{}", e.id, cfg.variant, cfg.epsilon, cfg.steps, r.final_loss(), r.final_gradnorm())?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tests::logistic_1d;
    use rand::{Rng, SeedableRng};

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_step_size(0, 100, 0.4), 0.4);
        assert!((cosine_step_size(50, 100, 0.4) - 0.2).abs() < 1e-15);
        assert!(cosine_step_size(100, 100, 0.4).abs() < 1e-15);
    }

    #[test]
    fn projection_is_exactly_feasible() {
        let eps = 4.0 / 255.0;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10_000 {
            let c: f64 = rng.gen();
            let v = c + rng.gen_range(-1.0..1.0);
            let p = project_linf(&[v], &[c], eps)[0];
            assert!((p - c).abs() <= eps && (0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn projection_clamps() {
        assert_eq!(project_linf(&[0.52], &[0.5], 0.1), vec![0.52]);
        assert!((project_linf(&[0.9], &[0.5], 0.1)[0] - 0.6).abs() < 1e-15);
        assert_eq!(project_linf(&[1.3, -0.2], &[0.98, 0.01], 0.5), vec![1.0, 0.0]);
    }

    #[test]
    fn sign_of_zero_is_zero() {
        assert_eq!(sign(0.0), 0.0);
        assert_eq!(sign(-0.0), 0.0);
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("i_apgd".parse::<Variant>().unwrap(), Variant::IApgd);
        assert!(matches!("i_deepfool".parse::<Variant>(), Err(Error::UnknownVariant(_))));
    }

    #[test]
    fn one_mfa_step_on_logistic_model() {
        // p(y=0 | x) = σ(x): ∂ℓ/∂x = −(1 − p) < 0, so the step moves +α₀.
        let m = logistic_1d(1.0, 0.0);
        let e = LabeledExample::new("a", vec![0.5], 0);
        let cfg = FabricationConfig { epsilon: 0.2, steps: 1, alpha0: 0.05, beta: 0.0, ..FabricationConfig::mfa(0.2) };
        let r = mfa_fabricate(&m, &e, &cfg).unwrap();
        assert!((r.x_bar[0] - 0.55).abs() < 1e-15);
        assert!(m.confidence(&e.with_pixels(r.x_bar.clone())).unwrap() > m.confidence(&e).unwrap());
    }

    #[test]
    fn bim_moves_alpha_per_step() {
        let m = logistic_1d(2.0, -1.0);
        let e = LabeledExample::new("a", vec![0.2], 0);
        let cfg = FabricationConfig { steps: 4, alpha0: 0.01, ..FabricationConfig::mfa(0.5) }.with_variant(Variant::IBim);
        let r = fabricate_baseline(&m, &e, &cfg).unwrap();
        assert!((r.x_bar[0] - 0.24).abs() < 1e-12);
        assert!(r.loss_trajectory.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn zero_epsilon_is_identity() {
        let m = logistic_1d(1.5, 0.3);
        let e = LabeledExample::new("a", vec![0.37], 0);
        for v in Variant::ALL {
            let cfg = FabricationConfig { steps: 5, alpha0: 0.1, ..FabricationConfig::mfa(0.0) }.with_variant(v);
            let r = fabricate(&m, &e, &cfg).unwrap();
            assert_eq!(r.x_bar, e.x, "{v}");
            assert!(r.delta.iter().all(|d| *d == 0.0));
        }
    }

    #[test]
    fn cw_margin_gradient_direction() {
        let m = logistic_1d(1.0, 0.0);
        let e = LabeledExample::new("a", vec![0.5], 0);
        let g = margin_gradient(&m, &e, &e.x).unwrap();
        assert!(g[0] > 0.0);
    }

    #[test]
    fn apgd_checkpoint_schedule() {
        let w = apgd_checkpoints(100);
        assert_eq!(&w[..4], &[0, 22, 41, 57]);
        assert!(w.windows(2).all(|p| p[1] > p[0]));
        assert!(*w.last().unwrap() <= 100);
    }

    #[test]
    fn adaptive_at_zero_lambda_matches_mfa_without_momentum() {
        let m = logistic_1d(3.0, -1.0);
        let e = LabeledExample::new("a", vec![0.4], 0);
        let cfg = FabricationConfig { steps: 6, beta: 0.0, ..FabricationConfig::mfa(0.1) };
        let a = adaptive_mfa(&m, &e, &cfg).unwrap();
        let b = mfa_fabricate(&m, &e, &cfg).unwrap();
        assert_eq!(a.x_bar, b.x_bar);
    }
}
