//! Threshold-swept ROC machinery and scalar metrics.
//!
//! Scores are oriented "larger ⇒ positive". Equal scores always cross a
//! threshold together, so tied positive/negative pairs contribute a diagonal
//! segment and count one half in the AUC.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Empirical ROC curve from `(0, 0)` to `(1, 1)`.
///
/// Vertex `i` classifies as positive every score `>= thresholds[i]`; the first
/// vertex has threshold `+∞`.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    pub positive_label_meaning: String,
    pub n_positive: usize,
    pub n_negative: usize,
}

/// Build the exact empirical ROC of `(score, is_positive)` pairs.
pub fn roc_curve(scores: &[(f64, bool)]) -> Result<RocCurve> {
    roc_curve_labeled(scores, "positive")
}

pub fn roc_curve_labeled(scores: &[(f64, bool)], positive_label_meaning: &str) -> Result<RocCurve> {
    if scores.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::InvalidConfig("NaN score".into()));
    }
    let n_pos = scores.iter().filter(|(_, l)| *l).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut thresholds = vec![f64::INFINITY];
    let mut fpr = vec![0.0];
    let mut tpr = vec![0.0];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        thresholds.push(s);
        fpr.push(fp as f64 / n_neg as f64);
        tpr.push(tp as f64 / n_pos as f64);
    }
    Ok(RocCurve {
        thresholds,
        fpr,
        tpr,
        positive_label_meaning: positive_label_meaning.to_string(),
        n_positive: n_pos,
        n_negative: n_neg,
    })
}

fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2).zip(ys.windows(2)).map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) * 0.5).sum()
}

/// Trapezoidal area under the ROC curve.
pub fn auc(curve: &RocCurve) -> f64 {
    trapezoid(&curve.fpr, &curve.tpr)
}

/// TPR at FPR = `q`, linearly interpolated between bracketing vertices. When a
/// vertical run of vertices sits exactly at `q`, the highest TPR is returned.
pub fn tpr_at_fpr(curve: &RocCurve, q: f64) -> f64 {
    let (f, t) = (&curve.fpr, &curve.tpr);
    let q = q.clamp(0.0, 1.0);
    let i = f.partition_point(|&v| v <= q) - 1;
    if f[i] == q || i + 1 == f.len() {
        return t[i];
    }
    let (f0, f1, t0, t1) = (f[i], f[i + 1], t[i], t[i + 1]);
    t0 + (q - f0) * (t1 - t0) / (f1 - f0)
}

/// Equal error rate: where FPR and FNR = 1 − TPR meet, interpolated linearly
/// along the curve.
pub fn eer(curve: &RocCurve) -> f64 {
    let (f, t) = (&curve.fpr, &curve.tpr);
    let gap = |i: usize| f[i] - (1.0 - t[i]);
    let i = (0..f.len()).find(|&i| gap(i) >= 0.0).expect("last vertex has gap 1");
    if gap(i) == 0.0 || i == 0 {
        return f[i];
    }
    let (f0, t0) = (f[i - 1], t[i - 1]);
    let (df, dt) = (f[i] - f0, t[i] - t0);
    let s = (1.0 - t0 - f0) / (df + dt);
    f0 + s * df
}

/// `(TNR, TPR)` trade-off: TNR over the negative population, TPR over the
/// positive one, ordered from the strictest threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct TnrTprCurve {
    pub thresholds: Vec<f64>,
    pub tnr: Vec<f64>,
    pub tpr: Vec<f64>,
}

impl TnrTprCurve {
    pub fn from_roc(roc: &RocCurve) -> Self {
        Self {
            thresholds: roc.thresholds.clone(),
            tnr: roc.fpr.iter().map(|f| 1.0 - f).collect(),
            tpr: roc.tpr.clone(),
        }
    }

    /// Points for a log-log rendering; zeros are floored at `1e-4`.
    pub fn log_points(&self) -> Vec<(f64, f64)> {
        self.tnr.iter().zip(&self.tpr).map(|(a, b)| (a.max(1e-4).log10(), b.max(1e-4).log10())).collect()
    }
}

/// One minus the area under the TNR-TPR curve.
pub fn error_area(curve: &TnrTprCurve) -> f64 {
    1.0 - trapezoid(&curve.tnr, &curve.tpr).abs()
}

/// Standard ROC scalars for a score set.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RocSummary {
    pub auc: f64,
    pub eer: f64,
    pub tpr_at_1: f64,
    pub tpr_at_5: f64,
    pub tpr_at_10: f64,
    pub tpr_at_20: f64,
}

pub fn summarize(curve: &RocCurve) -> RocSummary {
    RocSummary {
        auc: auc(curve),
        eer: eer(curve),
        tpr_at_1: tpr_at_fpr(curve, 0.01),
        tpr_at_5: tpr_at_fpr(curve, 0.05),
        tpr_at_10: tpr_at_fpr(curve, 0.10),
        tpr_at_20: tpr_at_fpr(curve, 0.20),
    }
}

/// Write `(threshold, fpr, tpr)` rows.
pub fn write_roc_csv(curve: &RocCurve, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "threshold,fpr,tpr")?;
    for ((t, x), y) in curve.thresholds.iter().zip(&curve.fpr).zip(&curve.tpr) {
        writeln!(f, "{t},{x},{y}")?;
    }
    Ok(())
}

/// Write `(threshold, tnr, tpr)` rows.
pub fn write_tnr_tpr_csv(curve: &TnrTprCurve, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "threshold,tnr,tpr")?;
    for ((t, x), y) in curve.thresholds.iter().zip(&curve.tnr).zip(&curve.tpr) {
        writeln!(f, "{t},{x},{y}")?;
    }
    Ok(())
}
