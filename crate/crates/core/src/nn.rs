//! Differentiable classifiers.
//!
//! A [`Classifier`] is a small feed-forward network (MLP or CNN) with all
//! parameters in one flat vector. Forward and backward passes are written out by
//! hand so that exact input gradients are cheap and deterministic. Networks
//! have no stochastic layers, so evaluation-mode semantics are the only mode.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{LabeledExample, Shape};
use crate::error::{Error, Result};
use crate::seed;

/// Floor applied to the true-class probability before taking its log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Largest loss value, `-ln(PROB_FLOOR)`.
pub fn max_loss() -> f64 {
    -PROB_FLOOR.ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if out > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - out * out,
        }
    }
}

/// Architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchSpec {
    /// Fully connected layers with the given hidden widths.
    Mlp { hidden: Vec<usize>, activation: Activation },
    /// 3×3 same-padded conv blocks (conv, activation, 2×2 max-pool), then an
    /// optional hidden dense layer and the linear head.
    Cnn { channels: Vec<usize>, hidden: usize, activation: Activation },
}

impl ArchSpec {
    pub fn id(&self) -> String {
        let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join("x");
        let act = |a: &Activation| match a {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        };
        match self {
            ArchSpec::Mlp { hidden, activation } if hidden.is_empty() => format!("linear-{}", act(activation)),
            ArchSpec::Mlp { hidden, activation } => format!("mlp{}-{}", join(hidden), act(activation)),
            ArchSpec::Cnn { channels, hidden, activation } => {
                format!("cnn{}-h{}-{}", join(channels), hidden, act(activation))
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Conv { cin: usize, cout: usize, h: usize, w: usize, w_off: usize, b_off: usize },
    Pool { c: usize, h: usize, w: usize },
    Act(Activation),
    Linear { inp: usize, out: usize, w_off: usize, b_off: usize },
}

fn build_layers(arch: &ArchSpec, shape: Shape, n_classes: usize) -> Result<(Vec<Layer>, usize)> {
    let mut layers = Vec::new();
    let mut n_params = 0usize;
    fn linear(layers: &mut Vec<Layer>, n_params: &mut usize, inp: usize, out: usize) {
        let w_off = *n_params;
        let b_off = w_off + inp * out;
        *n_params = b_off + out;
        layers.push(Layer::Linear { inp, out, w_off, b_off });
    }
    match arch {
        ArchSpec::Mlp { hidden, activation } => {
            let mut width = shape.len();
            for &h in hidden {
                linear(&mut layers, &mut n_params, width, h);
                layers.push(Layer::Act(*activation));
                width = h;
            }
            linear(&mut layers, &mut n_params, width, n_classes);
        }
        ArchSpec::Cnn { channels, hidden, activation } => {
            let (mut c, mut h, mut w) = (shape.channels, shape.height, shape.width);
            let mut conv_params = 0usize;
            let mut conv_layers = Vec::new();
            for &cout in channels {
                if h < 2 || w < 2 {
                    return Err(Error::InvalidConfig(format!(
                        "too many pooling stages for a {}x{} input",
                        shape.height, shape.width
                    )));
                }
                let w_off = conv_params;
                let b_off = w_off + cout * c * 9;
                conv_params = b_off + cout;
                conv_layers.push(Layer::Conv { cin: c, cout, h, w, w_off, b_off });
                conv_layers.push(Layer::Act(*activation));
                conv_layers.push(Layer::Pool { c: cout, h, w });
                c = cout;
                h /= 2;
                w /= 2;
            }
            n_params = conv_params;
            layers.extend(conv_layers);
            let flat = c * h * w;
            if *hidden > 0 {
                linear(&mut layers, &mut n_params, flat, *hidden);
                layers.push(Layer::Act(*activation));
                linear(&mut layers, &mut n_params, *hidden, n_classes);
            } else {
                linear(&mut layers, &mut n_params, flat, n_classes);
            }
        }
    }
    Ok((layers, n_params))
}

/// Activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    acts: Vec<Vec<f64>>,
    pool_idx: Vec<Vec<usize>>,
}

impl Trace {
    pub fn logits(&self) -> &[f64] {
        self.acts.last().expect("trace has an output")
    }
}

/// A trained or initialized classifier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Classifier {
    pub arch_id: String,
    pub arch: ArchSpec,
    pub shape: Shape,
    pub n_classes: usize,
    #[serde(skip)]
    pub params: Vec<f64>,
    #[serde(skip)]
    layers: Vec<Layer>,
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Cross-entropy `-ln max(p_y, 1e-12)` computed from logits.
pub fn cross_entropy(z: &[f64], y: usize) -> f64 {
    if z.iter().all(|v| *v <= z[y]) {
        // ln(1 + Σ_{i≠y} e^{z_i − z_y}) keeps precision as p_y → 1
        let tail: f64 = z.iter().enumerate().filter(|(i, _)| *i != y).map(|(_, v)| (v - z[y]).exp()).sum();
        return tail.ln_1p();
    }
    (log_sum_exp(z) - z[y]).min(max_loss())
}

/// `log(p_y / (1 - p_y))` computed from logits without cancellation, clamped to
/// the range reachable from probabilities floored at `1e-12`.
pub fn confidence_logit(z: &[f64], y: usize) -> f64 {
    let others: Vec<f64> = z.iter().enumerate().filter(|(i, _)| *i != y).map(|(_, v)| *v).collect();
    let bound = ((1.0 - PROB_FLOOR) / PROB_FLOOR).ln();
    if others.is_empty() {
        return bound;
    }
    (z[y] - log_sum_exp(&others)).clamp(-bound, bound)
}

impl Classifier {
    /// Initialize with He-uniform weights and zero biases.
    pub fn new(arch: ArchSpec, shape: Shape, n_classes: usize, init_seed: u64) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::InvalidConfig("a classifier needs at least 2 classes".into()));
        }
        let (layers, n_params) = build_layers(&arch, shape, n_classes)?;
        let mut params = vec![0.0; n_params];
        let mut rng = seed::rng(init_seed, "init", 0);
        let mut gain = 6.0;
        for layer in &layers {
            match *layer {
                Layer::Conv { cin, cout, w_off, .. } => {
                    let bound = (gain / (cin * 9) as f64).sqrt();
                    for p in &mut params[w_off..w_off + cout * cin * 9] {
                        *p = rng.gen_range(-bound..bound);
                    }
                }
                Layer::Linear { inp, out, w_off, .. } => {
                    let bound = (gain / inp as f64).sqrt();
                    for p in &mut params[w_off..w_off + inp * out] {
                        *p = rng.gen_range(-bound..bound);
                    }
                }
                Layer::Act(Activation::Tanh) => gain = 3.0,
                _ => {}
            }
        }
        Ok(Self { arch_id: arch.id(), arch, shape, n_classes, params, layers })
    }

    /// Build from explicit parameters.
    pub fn from_params(arch: ArchSpec, shape: Shape, n_classes: usize, params: Vec<f64>) -> Result<Self> {
        let (layers, n_params) = build_layers(&arch, shape, n_classes)?;
        if params.len() != n_params {
            return Err(Error::ShapeMismatch { expected: n_params, actual: params.len() });
        }
        Ok(Self { arch_id: arch.id(), arch, shape, n_classes, params, layers })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_len(&self) -> usize {
        self.shape.len()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.shape.len() {
            return Err(Error::ShapeMismatch { expected: self.shape.len(), actual: x.len() });
        }
        Ok(())
    }

    fn check_example(&self, e: &LabeledExample) -> Result<()> {
        self.check_input(&e.x)?;
        if e.y >= self.n_classes {
            return Err(Error::LabelOutOfRange { label: e.y, n_classes: self.n_classes });
        }
        Ok(())
    }

    /// Forward pass recording every intermediate activation.
    pub fn forward(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        Ok(self.forward_unchecked(x))
    }

    fn forward_unchecked(&self, x: &[f64]) -> Trace {
        let p = &self.params;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pool_idx = Vec::new();
        acts.push(x.to_vec());
        for layer in &self.layers {
            let input = acts.last().expect("nonempty");
            let out = match *layer {
                Layer::Conv { cin, cout, h, w, w_off, b_off } => {
                    let mut out = vec![0.0; cout * h * w];
                    for co in 0..cout {
                        let o = &mut out[co * h * w..(co + 1) * h * w];
                        o.iter_mut().for_each(|v| *v = p[b_off + co]);
                        for ci in 0..cin {
                            let inp = &input[ci * h * w..(ci + 1) * h * w];
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let wv = p[w_off + ((co * cin + ci) * 3 + ky) * 3 + kx];
                                    conv_tap(o, inp, h, w, ky, kx, wv);
                                }
                            }
                        }
                    }
                    out
                }
                Layer::Pool { c, h, w } => {
                    let (oh, ow) = (h / 2, w / 2);
                    let mut out = vec![0.0; c * oh * ow];
                    let mut idx = vec![0usize; c * oh * ow];
                    for ch in 0..c {
                        for i in 0..oh {
                            for j in 0..ow {
                                let mut best = f64::NEG_INFINITY;
                                let mut bi = 0;
                                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    let k = (ch * h + 2 * i + dy) * w + 2 * j + dx;
                                    if input[k] > best {
                                        best = input[k];
                                        bi = k;
                                    }
                                }
                                let o = (ch * oh + i) * ow + j;
                                out[o] = best;
                                idx[o] = bi;
                            }
                        }
                    }
                    pool_idx.push(idx);
                    out
                }
                Layer::Act(a) => input.iter().map(|&v| a.apply(v)).collect(),
                Layer::Linear { inp, out, w_off, b_off } => (0..out)
                    .map(|o| {
                        let row = &p[w_off + o * inp..w_off + (o + 1) * inp];
                        p[b_off + o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
                    })
                    .collect(),
            };
            acts.push(out);
        }
        Trace { acts, pool_idx }
    }

    /// Backpropagate `grad_out` (gradient w.r.t. logits). Returns the gradient
    /// w.r.t. the input and, when `param_grad` is given, accumulates the
    /// parameter gradient into it.
    pub fn backward(&self, trace: &Trace, grad_out: &[f64], mut param_grad: Option<&mut [f64]>) -> Vec<f64> {
        let p = &self.params;
        let mut g = grad_out.to_vec();
        let mut pool_i = trace.pool_idx.len();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.acts[li];
            let output = &trace.acts[li + 1];
            g = match *layer {
                Layer::Conv { cin, cout, h, w, w_off, b_off } => {
                    let mut gin = vec![0.0; cin * h * w];
                    for co in 0..cout {
                        let go = &g[co * h * w..(co + 1) * h * w];
                        if let Some(pg) = param_grad.as_deref_mut() {
                            pg[b_off + co] += go.iter().sum::<f64>();
                        }
                        for ci in 0..cin {
                            let inp = &input[ci * h * w..(ci + 1) * h * w];
                            let gi = &mut gin[ci * h * w..(ci + 1) * h * w];
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let k = w_off + ((co * cin + ci) * 3 + ky) * 3 + kx;
                                    conv_tap_transpose(gi, go, h, w, ky, kx, p[k]);
                                    if let Some(pg) = param_grad.as_deref_mut() {
                                        pg[k] += conv_tap_dot(go, inp, h, w, ky, kx);
                                    }
                                }
                            }
                        }
                    }
                    gin
                }
                Layer::Pool { c, h, w } => {
                    pool_i -= 1;
                    let mut gin = vec![0.0; c * h * w];
                    for (o, &k) in trace.pool_idx[pool_i].iter().enumerate() {
                        gin[k] += g[o];
                    }
                    gin
                }
                Layer::Act(a) => g.iter().zip(output).map(|(gv, &o)| gv * a.derivative_from_output(o)).collect(),
                Layer::Linear { inp, out, w_off, b_off } => {
                    let mut gin = vec![0.0; inp];
                    for o in 0..out {
                        let go = g[o];
                        if go == 0.0 {
                            continue;
                        }
                        let row = &p[w_off + o * inp..w_off + (o + 1) * inp];
                        gin.iter_mut().zip(row).for_each(|(gi, wv)| *gi += go * wv);
                        if let Some(pg) = param_grad.as_deref_mut() {
                            pg[b_off + o] += go;
                            pg[w_off + o * inp..w_off + (o + 1) * inp]
                                .iter_mut()
                                .zip(input)
                                .for_each(|(gw, xv)| *gw += go * xv);
                        }
                    }
                    gin
                }
            };
        }
        g
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.acts.pop().expect("output"))
    }

    /// Softmax probabilities over the classes.
    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(x)?))
    }

    /// Probability of the true label.
    pub fn confidence(&self, e: &LabeledExample) -> Result<f64> {
        self.check_example(e)?;
        Ok(self.probabilities(&e.x)?[e.y])
    }

    /// Cross-entropy loss `-ln p_y`, with `p_y` floored at `1e-12`.
    pub fn sample_loss(&self, e: &LabeledExample) -> Result<f64> {
        self.check_example(e)?;
        Ok(cross_entropy(&self.logits(&e.x)?, e.y))
    }

    /// Penultimate-layer features (the input of the linear head).
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut t = self.forward(x)?;
        let n = t.acts.len();
        Ok(t.acts.swap_remove(n - 2))
    }

    /// Loss and its exact gradient with respect to the input pixels.
    pub fn loss_and_input_gradient(&self, e: &LabeledExample) -> Result<(f64, Vec<f64>)> {
        self.check_example(e)?;
        let t = self.forward_unchecked(&e.x);
        let z = t.logits();
        let loss = cross_entropy(z, e.y);
        let mut dz = softmax(z);
        dz[e.y] -= 1.0;
        Ok((loss, self.backward(&t, &dz, None)))
    }

    /// Exact gradient of the cross-entropy loss with respect to the input.
    pub fn input_gradient(&self, e: &LabeledExample) -> Result<Vec<f64>> {
        Ok(self.loss_and_input_gradient(e)?.1)
    }

    /// Jacobian of the logits w.r.t. the input, row-major `n_classes × input_len`.
    pub fn logit_jacobian(&self, x: &[f64]) -> Result<Vec<f64>> {
        let t = self.forward(x)?;
        let mut jac = Vec::with_capacity(self.n_classes * x.len());
        for k in 0..self.n_classes {
            let mut e = vec![0.0; self.n_classes];
            e[k] = 1.0;
            jac.extend(self.backward(&t, &e, None));
        }
        Ok(jac)
    }

    /// Hessian-vector product of the loss w.r.t. the input by a symmetric
    /// difference of exact gradients along `v`.
    pub fn hessian_vector_product(&self, e: &LabeledExample, v: &[f64], h: f64) -> Result<Vec<f64>> {
        self.check_example(e)?;
        let plus: Vec<f64> = e.x.iter().zip(v).map(|(a, b)| a + h * b).collect();
        let minus: Vec<f64> = e.x.iter().zip(v).map(|(a, b)| a - h * b).collect();
        let gp = self.input_gradient(&e.with_pixels(plus))?;
        let gm = self.input_gradient(&e.with_pixels(minus))?;
        Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
    }

    /// Dense, symmetrized input Hessian of the loss (row-major, `d × d`).
    pub fn input_hessian(&self, e: &LabeledExample, h: f64) -> Result<Vec<f64>> {
        let d = self.input_len();
        let mut hess = vec![0.0; d * d];
        let mut basis = vec![0.0; d];
        for j in 0..d {
            basis[j] = 1.0;
            let col = self.hessian_vector_product(e, &basis, h)?;
            basis[j] = 0.0;
            for i in 0..d {
                hess[i * d + j] = col[i];
            }
        }
        for i in 0..d {
            for j in 0..i {
                let m = 0.5 * (hess[i * d + j] + hess[j * d + i]);
                hess[i * d + j] = m;
                hess[j * d + i] = m;
            }
        }
        Ok(hess)
    }

    /// Cross-entropy of `e` and accumulation of its parameter gradient.
    pub fn accumulate_param_gradient(&self, x: &[f64], y: usize, grad: &mut [f64]) -> f64 {
        let t = self.forward_unchecked(x);
        let z = t.logits();
        let loss = cross_entropy(z, y);
        let mut dz = softmax(z);
        dz[y] -= 1.0;
        self.backward(&t, &dz, Some(grad));
        loss
    }

    /// SHA-256 over the architecture id and parameter bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.arch_id.as_bytes());
        for p in &self.params {
            h.update(p.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Write a checkpoint: magic, JSON header length, JSON header, raw parameters.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(self)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
        }
        let mut n = [0u8; 8];
        r.read_exact(&mut n)?;
        let mut header = vec![0u8; u64::from_le_bytes(n) as usize];
        r.read_exact(&mut header)?;
        let meta: Classifier = serde_json::from_slice(&header)?;
        r.read_exact(&mut n)?;
        let count = u64::from_le_bytes(n) as usize;
        let mut bytes = vec![0u8; count * 8];
        r.read_exact(&mut bytes)?;
        let params = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::from_params(meta.arch, meta.shape, meta.n_classes, params)
    }
}

const CKPT_MAGIC: &[u8; 8] = b"MFCK\x01\0\0\0";

// One 3×3 tap of a same-padded convolution: o[i][j] += wv * inp[i+ky-1][j+kx-1].
#[inline]
fn conv_tap(o: &mut [f64], inp: &[f64], h: usize, w: usize, ky: usize, kx: usize, wv: f64) {
    let (i0, i1) = (1usize.saturating_sub(ky), (h + 1 - ky).min(h));
    let (j0, j1) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
    for i in i0..i1 {
        let si = i + ky - 1;
        let orow = &mut o[i * w + j0..i * w + j1];
        let irow = &inp[si * w + j0 + kx - 1..si * w + j1 + kx - 1];
        orow.iter_mut().zip(irow).for_each(|(a, b)| *a += wv * b);
    }
}

#[inline]
fn conv_tap_transpose(gi: &mut [f64], go: &[f64], h: usize, w: usize, ky: usize, kx: usize, wv: f64) {
    let (i0, i1) = (1usize.saturating_sub(ky), (h + 1 - ky).min(h));
    let (j0, j1) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
    for i in i0..i1 {
        let si = i + ky - 1;
        let grow = &go[i * w + j0..i * w + j1];
        let irow = &mut gi[si * w + j0 + kx - 1..si * w + j1 + kx - 1];
        irow.iter_mut().zip(grow).for_each(|(a, b)| *a += wv * b);
    }
}

#[inline]
fn conv_tap_dot(go: &[f64], inp: &[f64], h: usize, w: usize, ky: usize, kx: usize) -> f64 {
    let (i0, i1) = (1usize.saturating_sub(ky), (h + 1 - ky).min(h));
    let (j0, j1) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
    let mut s = 0.0;
    for i in i0..i1 {
        let si = i + ky - 1;
        let grow = &go[i * w + j0..i * w + j1];
        let irow = &inp[si * w + j0 + kx - 1..si * w + j1 + kx - 1];
        s += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
    }
    s
}
