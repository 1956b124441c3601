//! Labeled image examples, datasets and their on-disk forms.
//!
//! Images are stored channel-major `(channels, height, width)` as `f64` values
//! in `[0, 1]`. Two on-disk formats are supported: a packed tensor archive
//! (`.mfds`, lossless) and the CIFAR-10 binary batch layout (read-only).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An image with its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub id: String,
    pub x: Vec<f64>,
    pub y: usize,
}

impl LabeledExample {
    pub fn new(id: impl Into<String>, x: Vec<f64>, y: usize) -> Self {
        Self { id: id.into(), x, y }
    }

    /// Same id and label, different pixels.
    pub fn with_pixels(&self, x: Vec<f64>) -> Self {
        Self { id: self.id.clone(), x, y: self.y }
    }

    pub fn validate(&self, shape: Shape, n_classes: usize) -> Result<()> {
        if self.x.len() != shape.len() {
            return Err(Error::ShapeMismatch { expected: shape.len(), actual: self.x.len() });
        }
        if self.y >= n_classes {
            return Err(Error::LabelOutOfRange { label: self.y, n_classes });
        }
        if let Some(v) = self.x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidConfig(format!(
                "pixel value {v} of `{}` outside [0, 1]",
                self.id
            )));
        }
        Ok(())
    }
}

/// A collection of examples sharing one image shape and label space.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub shape: Shape,
    pub n_classes: usize,
    pub examples: Vec<LabeledExample>,
}

impl Dataset {
    pub fn new(shape: Shape, n_classes: usize, examples: Vec<LabeledExample>) -> Result<Self> {
        let ds = Self { shape, n_classes, examples };
        for e in &ds.examples {
            e.validate(shape, n_classes)?;
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn index(&self) -> std::collections::HashMap<&str, &LabeledExample> {
        self.examples.iter().map(|e| (e.id.as_str(), e)).collect()
    }

    /// Examples for `ids`, in the order given.
    pub fn select<'a, I, S>(&self, ids: I) -> Result<Vec<LabeledExample>>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str> + 'a,
    {
        let index = self.index();
        ids.into_iter()
            .map(|id| {
                index
                    .get(id.as_ref())
                    .map(|e| (*e).clone())
                    .ok_or_else(|| Error::UnknownId(id.as_ref().to_string()))
            })
            .collect()
    }

    pub fn save_archive(&self, path: &Path) -> Result<()> {
        write_archive(path, self.shape, self.n_classes, &self.examples)
    }

    pub fn load_archive(path: &Path) -> Result<Self> {
        let (shape, n_classes, examples) = read_archive(path)?;
        Self::new(shape, n_classes, examples)
    }
}

const ARCHIVE_MAGIC: &[u8; 8] = b"MFDS\x01\0\0\0";

/// Write examples as a packed little-endian tensor archive.
pub fn write_archive(
    path: &Path,
    shape: Shape,
    n_classes: usize,
    examples: &[LabeledExample],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(ARCHIVE_MAGIC)?;
    for v in [n_classes, shape.channels, shape.height, shape.width] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&(examples.len() as u64).to_le_bytes())?;
    for e in examples {
        if e.x.len() != shape.len() {
            return Err(Error::ShapeMismatch { expected: shape.len(), actual: e.x.len() });
        }
        w.write_all(&(e.id.len() as u32).to_le_bytes())?;
        w.write_all(e.id.as_bytes())?;
        w.write_all(&(e.y as u32).to_le_bytes())?;
        for v in &e.x {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Read a packed tensor archive written by [`write_archive`].
pub fn read_archive(path: &Path) -> Result<(Shape, usize, Vec<LabeledExample>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != ARCHIVE_MAGIC {
        return Err(Error::Format(format!("{} is not a tensor archive", path.display())));
    }
    let n_classes = read_u32(&mut r)? as usize;
    let shape = Shape::new(
        read_u32(&mut r)? as usize,
        read_u32(&mut r)? as usize,
        read_u32(&mut r)? as usize,
    );
    let mut nb = [0u8; 8];
    r.read_exact(&mut nb)?;
    let n = u64::from_le_bytes(nb) as usize;
    let mut examples = Vec::with_capacity(n);
    let mut buf = vec![0u8; shape.len() * 8];
    for _ in 0..n {
        let id_len = read_u32(&mut r)? as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)?;
        let id = String::from_utf8(id).map_err(|e| Error::Format(e.to_string()))?;
        let y = read_u32(&mut r)? as usize;
        r.read_exact(&mut buf)?;
        let x = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        examples.push(LabeledExample { id, x, y });
    }
    Ok((shape, n_classes, examples))
}

/// Load CIFAR-10 binary batches (`data_batch_*.bin`, `test_batch.bin`) from a directory.
pub fn load_cifar10_dir(dir: &Path, limit: Option<usize>) -> Result<Dataset> {
    const RECORD: usize = 1 + 3072;
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::InsufficientData(format!("no .bin batches in {}", dir.display())));
    }
    let mut examples = Vec::new();
    'outer: for f in files {
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("batch").to_string();
        let bytes = std::fs::read(&f)?;
        if bytes.len() % RECORD != 0 {
            return Err(Error::Format(format!("{} is not a CIFAR-10 batch", f.display())));
        }
        for (i, rec) in bytes.chunks_exact(RECORD).enumerate() {
            if limit.is_some_and(|l| examples.len() >= l) {
                break 'outer;
            }
            let x = rec[1..].iter().map(|&b| f64::from(b) / 255.0).collect();
            examples.push(LabeledExample::new(format!("{stem}-{i:05}"), x, rec[0] as usize));
        }
    }
    Dataset::new(Shape::new(3, 32, 32), 10, examples)
}

/// Parameters of the synthetic image generator.
///
/// Each class owns a smooth random prototype. An image is the prototype at a
/// random contrast, plus a random mixture of shared smooth nuisance patterns,
/// plus independent pixel noise, clamped into `[0, 1]`. A fraction of labels can
/// be resampled uniformly to create hard, memorization-only examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_examples: usize,
    pub n_classes: usize,
    pub shape: Shape,
    pub signal: f64,
    pub nuisance: f64,
    pub n_nuisance: usize,
    pub noise: f64,
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_examples: 2000,
            n_classes: 10,
            shape: Shape::new(3, 16, 16),
            signal: 0.12,
            nuisance: 0.15,
            n_nuisance: 16,
            noise: 0.08,
            label_noise: 0.0,
            seed: 0,
        }
    }
}

fn smooth_pattern(rng: &mut impl Rng, shape: Shape) -> Vec<f64> {
    let mut out = vec![0.0; shape.len()];
    let (h, w) = (shape.height as f64, shape.width as f64);
    for c in 0..shape.channels {
        for _ in 0..4 {
            let fy = rng.gen_range(0.5..2.5) * std::f64::consts::TAU / h;
            let fx = rng.gen_range(0.5..2.5) * std::f64::consts::TAU / w;
            let (py, px) = (rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.0..std::f64::consts::TAU));
            let amp: f64 = rng.gen_range(0.5..1.0);
            for i in 0..shape.height {
                for j in 0..shape.width {
                    out[(c * shape.height + i) * shape.width + j] +=
                        amp * ((fy * i as f64 + py).sin() * (fx * j as f64 + px).cos());
                }
            }
        }
    }
    let max = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    out.iter_mut().for_each(|v| *v /= max);
    out
}

/// Generate a synthetic image classification dataset.
pub fn synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.n_classes < 2 || spec.shape.is_empty() {
        return Err(Error::InvalidConfig("synthetic data needs ≥2 classes and a nonempty shape".into()));
    }
    let mut rng = seed::rng(spec.seed, "synthetic-patterns", 0);
    let prototypes: Vec<Vec<f64>> =
        (0..spec.n_classes).map(|_| smooth_pattern(&mut rng, spec.shape)).collect();
    let nuisance: Vec<Vec<f64>> =
        (0..spec.n_nuisance).map(|_| smooth_pattern(&mut rng, spec.shape)).collect();
    let scale = 1.0 / (spec.n_nuisance.max(1) as f64).sqrt();
    let mut examples = Vec::with_capacity(spec.n_examples);
    for i in 0..spec.n_examples {
        let mut r = seed::rng(spec.seed, "synthetic-example", i as u64);
        let class = i % spec.n_classes;
        let contrast = r.gen_range(0.6..1.4);
        let mut x: Vec<f64> = prototypes[class].iter().map(|p| 0.5 + spec.signal * contrast * p).collect();
        for q in &nuisance {
            let a: f64 = StandardNormal.sample(&mut r);
            let a = a * spec.nuisance * scale;
            x.iter_mut().zip(q).for_each(|(v, q)| *v += a * q);
        }
        for v in x.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut r);
            *v = (*v + spec.noise * n).clamp(0.0, 1.0);
        }
        let y = if r.gen_bool(spec.label_noise.clamp(0.0, 1.0)) {
            r.gen_range(0..spec.n_classes)
        } else {
            class
        };
        examples.push(LabeledExample::new(format!("s{i:06}"), x, y));
    }
    Dataset::new(spec.shape, spec.n_classes, examples)
}

/// Random horizontal flip and zero-padded random crop, applied during training only.
pub fn augment(x: &[f64], shape: Shape, pad: usize, rng: &mut impl Rng) -> Vec<f64> {
    let flip = rng.gen_bool(0.5);
    let dy = if pad > 0 { rng.gen_range(0..=2 * pad) as isize - pad as isize } else { 0 };
    let dx = if pad > 0 { rng.gen_range(0..=2 * pad) as isize - pad as isize } else { 0 };
    let (h, w) = (shape.height as isize, shape.width as isize);
    let mut out = vec![0.0; x.len()];
    for c in 0..shape.channels {
        for i in 0..h {
            for j in 0..w {
                let si = i + dy;
                let sj0 = j + dx;
                if si < 0 || si >= h || sj0 < 0 || sj0 >= w {
                    continue;
                }
                let sj = if flip { w - 1 - sj0 } else { sj0 };
                out[((c as isize * h + i) * w + j) as usize] = x[((c as isize * h + si) * w + sj) as usize];
            }
        }
    }
    out
}
