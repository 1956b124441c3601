//! Summary tables, curve dumps and plots built from saved outcomes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use memfab::games::{detector_roc, load_outcome, membership_roc, tnr_tpr_curve, weighted_membership_roc, GameOutcome};
use memfab::metrics::{error_area, roc_curve_labeled, summarize, write_roc_csv, write_tnr_tpr_csv, RocCurve, RocSummary, TnrTprCurve};

use crate::pipeline::Run;

const LOG_FLOOR: f64 = 1e-4;

/// A named table written both as CSV and as a markdown section.
struct Table {
    title: &'static str,
    file: &'static str,
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(title: &'static str, file: &'static str, header: Vec<&'static str>) -> Self {
        Self { title, file, header, rows: Vec::new() }
    }

    fn write_csv(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(self.file);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(path)
    }

    fn markdown(&self, out: &mut String) {
        let _ = writeln!(out, "## {}\n", self.title);
        let _ = writeln!(out, "| {} |", self.header.join(" | "));
        let _ = writeln!(out, "|{}", "---|".repeat(self.header.len()));
        for r in &self.rows {
            let _ = writeln!(out, "| {} |", r.join(" | "));
        }
        out.push('\n');
    }
}

fn f4(v: f64) -> String {
    format!("{v:.4}")
}

fn summary_cells(s: &RocSummary) -> Vec<String> {
    [s.auc, s.eer, s.tpr_at_1, s.tpr_at_5, s.tpr_at_10, s.tpr_at_20].into_iter().map(f4).collect()
}

const SUMMARY_HEADER: [&str; 6] = ["auc", "eer", "tpr@1%fpr", "tpr@5%fpr", "tpr@10%fpr", "tpr@20%fpr"];

/// Outcomes listed by a stage's manifest entry, keyed by file stem.
fn stage_outcomes(run: &Run, stage: &str) -> Result<Vec<(String, GameOutcome)>> {
    let Some(rec) = run.manifest.stages.get(stage) else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for rel in rec.artifacts.iter().filter(|p| p.extension().is_some_and(|e| e == "csv")) {
        let csv = run.out.join(rel);
        let json = csv.with_extension("json");
        if !json.exists() || !rel.starts_with("outcomes") {
            continue;
        }
        let (o, _) = load_outcome(&csv, &json).with_context(|| format!("reading {}", csv.display()))?;
        let name = csv.file_stem().unwrap().to_string_lossy().into_owned();
        out.push((name, o));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

fn field<'a>(o: &'a GameOutcome, path: &[&str]) -> Option<&'a serde_json::Value> {
    path.iter().try_fold(&o.config, |v, k| v.get(k))
}

fn text(v: Option<&serde_json::Value>) -> String {
    match v {
        Some(serde_json::Value::String(s)) => s.clone(),
        Some(v) => v.to_string(),
        None => String::new(),
    }
}

pub fn write_report(run: &Run) -> Result<(Vec<PathBuf>, BTreeMap<String, f64>)> {
    let dir = run.out.join("report");
    let curves = dir.join("curves");
    std::fs::create_dir_all(&curves)?;
    let mut artifacts = Vec::new();
    let mut metrics = BTreeMap::new();
    let mut tables = Vec::new();
    let main_tag = crate::config::fabrication_tag(&run.cfg.fabrication_grid()[0]);

    let mut mfa = Table::new(
        "Fabricated nonmembers against members",
        "mfa.csv",
        vec!["variant", "epsilon_255", "adaptive_lambda", "kind", "error_area", "eer", "auc"],
    );
    let mut tnr_plot = Vec::new();
    for (name, o) in stage_outcomes(run, "fabricate")? {
        let tt = tnr_tpr_curve(&o)?;
        let roc = membership_roc(&o)?;
        let s = summarize(&roc);
        let ea = error_area(&tt);
        let eps = field(&o, &["fabrication", "epsilon"]).and_then(|v| v.as_f64()).unwrap_or(f64::NAN);
        let kind = text(field(&o, &["kind"]));
        mfa.rows.push(vec![
            text(field(&o, &["fabrication", "variant"])),
            format!("{:.3}", eps * 255.0),
            text(field(&o, &["fabrication", "adaptive_lambda"])),
            kind.clone(),
            f4(ea),
            f4(s.eer),
            f4(s.auc),
        ]);
        metrics.insert(format!("mfa_{name}_error_area"), ea);
        let p = curves.join(format!("mfa-{name}-tnr_tpr.csv"));
        write_tnr_tpr_csv(&tt, &p)?;
        artifacts.push(p);
        if name.starts_with(&format!("{main_tag}-")) {
            tnr_plot.push((kind, tt));
        }
    }
    tables.push(mfa);

    let mut audit_header = vec!["kind"];
    audit_header.extend(SUMMARY_HEADER);
    let mut audit = Table::new("Membership inference on natural samples", "audit.csv", audit_header);
    let mut roc_plot = Vec::new();
    for (name, o) in stage_outcomes(run, "audit")? {
        let roc = membership_roc(&o)?;
        let mut row = vec![name.clone()];
        row.extend(summary_cells(&summarize(&roc)));
        audit.rows.push(row);
        let p = curves.join(format!("mi-{name}-roc.csv"));
        write_roc_csv(&roc, &p)?;
        artifacts.push(p);
        roc_plot.push((name, roc));
    }
    tables.push(audit);

    let mut detect = Table::new(
        "Fabrication detection",
        "detect.csv",
        vec!["fabrication", "score", "auc", "eer", "n_members", "n_fabricated"],
    );
    for (name, o) in stage_outcomes(run, "detect")? {
        let n_mem = o.records.iter().filter(|r| r.member).count();
        let n_fab = o.records.iter().filter(|r| r.fabricated).count();
        let mut scored: Vec<(&str, RocCurve)> = Vec::new();
        if n_mem > 0 && n_fab > 0 {
            scored.push(("gradient_norm", detector_roc(&o)?));
            for (label, pick) in [("mahalanobis", 0), ("lid", 1)] {
                let s: Option<Vec<(f64, bool)>> =
                    o.records.iter().map(|r| if pick == 0 { r.mahalanobis } else { r.lid }.map(|v| (v, r.fabricated))).collect();
                if let Some(s) = s {
                    scored.push((label, roc_curve_labeled(&s, "fabricated")?));
                }
            }
        }
        if scored.is_empty() {
            detect.rows.push(vec![name.clone(), "gradient_norm".into(), "nan".into(), "nan".into(), n_mem.to_string(), n_fab.to_string()]);
        }
        for (label, roc) in scored {
            let s = summarize(&roc);
            detect.rows.push(vec![name.clone(), label.into(), f4(s.auc), f4(s.eer), n_mem.to_string(), n_fab.to_string()]);
            metrics.insert(format!("mfd_{label}_auc"), s.auc);
            let p = curves.join(format!("mfd-{name}-{label}-roc.csv"));
            write_roc_csv(&roc, &p)?;
            artifacts.push(p);
        }
    }
    tables.push(detect);

    let mut robust_header = vec!["kind", "lambda"];
    robust_header.extend(SUMMARY_HEADER);
    let mut robust = Table::new("Robust inference under fabricated queries", "robust.csv", robust_header);
    let mut rows = Vec::new();
    for (name, o) in stage_outcomes(run, "robust")? {
        let kind = text(field(&o, &["kind"]));
        let (lambda, roc) = if name.ends_with("-baseline") {
            (None, membership_roc(&o)?)
        } else {
            (field(&o, &["lambda"]).and_then(|v| v.as_f64()), weighted_membership_roc(&o)?)
        };
        let s = summarize(&roc);
        let label = lambda.map_or("baseline".to_string(), |l| l.to_string());
        metrics.insert(format!("armia_{kind}_{label}_auc"), s.auc);
        let mut row = vec![kind.clone(), label];
        row.extend(summary_cells(&s));
        rows.push((kind, lambda.unwrap_or(f64::NEG_INFINITY), row));
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    robust.rows = rows.into_iter().map(|r| r.2).collect();
    tables.push(robust);

    let mut md = String::from("# Run report\n\n");
    let _ = writeln!(md, "config hash `{}`\n", run.manifest.config_hash);
    if let Some(chosen) = run.manifest.notes.get("calibrated_lambda") {
        let _ = writeln!(md, "calibrated lambda: `{chosen}`\n");
    }
    for t in &tables {
        artifacts.push(t.write_csv(&dir)?);
        t.markdown(&mut md);
    }
    let summary = dir.join("summary.md");
    std::fs::write(&summary, md)?;
    artifacts.push(summary);

    if !roc_plot.is_empty() {
        let p = dir.join("mi_roc.svg");
        std::fs::write(&p, roc_svg(&roc_plot))?;
        artifacts.push(p);
    }
    if !tnr_plot.is_empty() {
        let p = dir.join("mfa_tnr_tpr.svg");
        std::fs::write(&p, tnr_tpr_svg(&tnr_plot))?;
        artifacts.push(p);
    }
    Ok((artifacts, metrics))
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const SIZE: f64 = 360.0;
const PAD: f64 = 40.0;

fn svg_frame(title: &str, x_label: &str, y_label: &str, ticks: &[(f64, &str)], body: &str, legend: &[String]) -> String {
    let mut s = String::new();
    let w = SIZE + 2.0 * PAD + 120.0;
    let h = SIZE + 2.0 * PAD;
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{title}</text>"#, PAD + SIZE / 2.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, PAD + SIZE / 2.0, h - 5.0);
    let _ = writeln!(s, r#"<text x="12" y="{}" text-anchor="middle" transform="rotate(-90 12 {})">{y_label}</text>"#, PAD + SIZE / 2.0, PAD + SIZE / 2.0);
    for &(t, label) in ticks {
        let x = PAD + t * SIZE;
        let y = PAD + (1.0 - t) * SIZE;
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{label}</text>"#, PAD + SIZE + 14.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{label}</text>"#, PAD - 4.0, y + 4.0);
    }
    s.push_str(body);
    for (i, name) in legend.iter().enumerate() {
        let y = PAD + 14.0 * i as f64 + 10.0;
        let x = PAD + SIZE + 10.0;
        let _ = writeln!(s, r#"<rect x="{x}" y="{}" width="10" height="3" fill="{}"/>"#, y - 4.0, COLORS[i % COLORS.len()]);
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{name}</text>"#, x + 14.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Polyline through unit-square points.
fn polyline(points: impl Iterator<Item = (f64, f64)>, color: &str) -> String {
    let pts: Vec<String> =
        points.map(|(x, y)| format!("{:.2},{:.2}", PAD + x * SIZE, PAD + (1.0 - y) * SIZE)).collect();
    format!(r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" ")) + "\n"
}

fn roc_svg(curves: &[(String, RocCurve)]) -> String {
    let mut body = polyline([(0.0, 0.0), (1.0, 1.0)].into_iter(), "#bbbbbb");
    for (i, (_, c)) in curves.iter().enumerate() {
        body.push_str(&polyline(c.fpr.iter().copied().zip(c.tpr.iter().copied()), COLORS[i % COLORS.len()]));
    }
    let ticks = [(0.0, "0"), (0.5, "0.5"), (1.0, "1")];
    let legend: Vec<String> = curves.iter().map(|c| c.0.clone()).collect();
    svg_frame("Membership ROC", "false positive rate", "true positive rate", &ticks, &body, &legend)
}

fn log_unit(v: f64) -> f64 {
    let lo = LOG_FLOOR.log10();
    (v.max(LOG_FLOOR).log10() - lo) / -lo
}

fn tnr_tpr_svg(curves: &[(String, TnrTprCurve)]) -> String {
    let mut body = String::new();
    for (i, (_, c)) in curves.iter().enumerate() {
        let pts = c.tnr.iter().zip(&c.tpr).map(|(&x, &y)| (log_unit(x), log_unit(y)));
        body.push_str(&polyline(pts, COLORS[i % COLORS.len()]));
    }
    let ticks = [(0.0, "1e-4"), (0.25, "1e-3"), (0.5, "1e-2"), (0.75, "1e-1"), (1.0, "1")];
    let legend: Vec<String> = curves.iter().map(|c| c.0.clone()).collect();
    svg_frame("Fabricated TNR against member TPR", "TNR (fabricated)", "TPR (members)", &ticks, &body, &legend)
}
