//! Accuracy-FLOPs curves and training-cost accounting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mutualnet::deploy::pareto_frontier;
use mutualnet::{expected_training_cost, model_cost, AccuracyTable, ModelConfig, ModelSpec, SamplingSpec};
use serde::{Deserialize, Serialize};

use crate::artifacts::write_atomic;
use crate::error::{HarnessError, Result};

pub const CURVES_CSV: &str = "curves.csv";
pub const CURVES_SVG: &str = "curves.svg";

/// One plotted point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub series: String,
    pub width: f64,
    pub resolution: u32,
    pub frames: u32,
    pub flops: u64,
    pub accuracy: f64,
    pub on_frontier: bool,
}

/// A labelled accuracy table to draw.
#[derive(Clone, Debug)]
pub struct Series<'a> {
    pub label: String,
    pub table: &'a AccuracyTable,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub svg: PathBuf,
    pub points: Vec<CurvePoint>,
}

pub fn curve_points(series: &Series<'_>, model: &ModelSpec) -> Result<Vec<CurvePoint>> {
    let frontier = pareto_frontier(series.table, model)?;
    let on: Vec<_> = frontier.iter().map(|p| p.config.key()).collect();
    let mut pts = series
        .table
        .rows
        .iter()
        .map(|r| {
            Ok(CurvePoint {
                series: series.label.clone(),
                width: r.config.width,
                resolution: r.config.resolution,
                frames: r.config.frames,
                flops: model_cost(model, &r.config)?,
                accuracy: r.accuracy,
                on_frontier: on.contains(&r.config.key()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    pts.sort_by(|a, b| a.flops.cmp(&b.flops).then(a.accuracy.total_cmp(&b.accuracy)));
    Ok(pts)
}

/// Writes `curves.csv` and `curves.svg` into `dir`: every evaluated point
/// of `main` colored by resolution, its Pareto staircase, and one staircase
/// per baseline.
pub fn report_curves(dir: &Path, model: &ModelSpec, main: &Series<'_>, baselines: &[Series<'_>]) -> Result<ReportFiles> {
    let mut points = curve_points(main, model)?;
    for b in baselines {
        points.extend(curve_points(b, model)?);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv = dir.join(CURVES_CSV);
    for p in &points {
        w.serialize(p).map_err(|e| HarnessError::format(&csv, e))?;
    }
    write_atomic(&csv, &w.into_inner().map_err(|e| HarnessError::format(&csv, e))?)?;
    let svg = dir.join(CURVES_SVG);
    write_atomic(&svg, render_svg(&points, &main.label).as_bytes())?;
    Ok(ReportFiles { csv, svg, points })
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const BASELINE_PALETTE: [&str; 4] = ["#555555", "#999999", "#bcbd22", "#7f7f7f"];

fn render_svg(points: &[CurvePoint], main: &str) -> String {
    let (w, h, m) = (720.0, 480.0, 60.0);
    let mf = |p: &CurvePoint| p.flops as f64 / 1e6;
    let (mut x0, mut x1) = points.iter().map(mf).fold((f64::MAX, f64::MIN), |(a, b), x| (a.min(x), b.max(x)));
    let (mut y0, mut y1) = points
        .iter()
        .map(|p| p.accuracy)
        .fold((f64::MAX, f64::MIN), |(a, b), y| (a.min(y), b.max(y)));
    if points.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |lo: f64, hi: f64| {
        let d = if hi > lo { 0.05 * (hi - lo) } else { 0.5 * lo.abs().max(1e-3) };
        (lo - d, hi + d)
    };
    (x0, x1) = pad(x0, x1);
    (y0, y1) = pad(y0, y1);
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    );
    for i in 0..=4 {
        let (xv, yv) = (x0 + (x1 - x0) * i as f64 / 4.0, y0 + (y1 - y0) * i as f64 / 4.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{xv:.1}</text>"#, sx(xv), h - m + 18.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{:.1}</text>"#, m - 6.0, sy(yv) + 4.0, 100.0 * yv);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">MFLOPs</text>"#, w / 2.0, h - 15.0);
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">top-1 accuracy (%)</text>"#,
        h / 2.0,
        h / 2.0
    );

    let mut by_series: BTreeMap<&str, Vec<&CurvePoint>> = BTreeMap::new();
    for p in points {
        by_series.entry(&p.series).or_default().push(p);
    }
    let resolutions: Vec<u32> = {
        let mut r: Vec<u32> = points.iter().filter(|p| p.series == main).map(|p| p.resolution).collect();
        r.sort_unstable();
        r.dedup();
        r
    };
    let color_of = |r: u32| PALETTE[resolutions.iter().position(|&x| x == r).unwrap_or(0) % PALETTE.len()];
    let mut legend: Vec<(String, &str)> = Vec::new();
    let mut baseline_idx = 0;
    for (name, pts) in &by_series {
        let frontier: Vec<&&CurvePoint> = pts.iter().filter(|p| p.on_frontier).collect();
        let is_main = *name == main;
        let mut d = String::new();
        for (i, p) in frontier.iter().enumerate() {
            if i == 0 {
                let _ = write!(d, "M{:.1} {:.1}", sx(mf(p)), sy(p.accuracy));
            } else {
                let _ = write!(d, " H{:.1} V{:.1}", sx(mf(p)), sy(p.accuracy));
            }
        }
        if let Some(last) = frontier.last() {
            let _ = write!(d, " H{:.1}", sx(x1).max(sx(mf(last))));
        }
        if is_main {
            for p in pts {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{:.1}" cy="{:.1}" r="{}" fill="{}" fill-opacity="{}"/>"#,
                    sx(mf(p)),
                    sy(p.accuracy),
                    if p.on_frontier { 3.5 } else { 2.0 },
                    color_of(p.resolution),
                    if p.on_frontier { 1.0 } else { 0.35 }
                );
            }
            // Staircase segments take the color of the resolution selected there.
            for pair in frontier.windows(2) {
                let (a, b) = (pair[0], pair[1]);
                let _ = writeln!(
                    s,
                    r#"<path d="M{:.1} {:.1} H{:.1}" stroke="{}" stroke-width="2.5" fill="none"/>"#,
                    sx(mf(a)),
                    sy(a.accuracy),
                    sx(mf(b)),
                    color_of(a.resolution)
                );
            }
            let _ = writeln!(s, r#"<path d="{d}" stroke="black" stroke-width="0.8" fill="none"/>"#);
            for &r in &resolutions {
                legend.push((format!("{main} @ {r}"), color_of(r)));
            }
        } else {
            let color = BASELINE_PALETTE[baseline_idx % BASELINE_PALETTE.len()];
            baseline_idx += 1;
            let _ = writeln!(s, r#"<path d="{d}" stroke="{color}" stroke-width="2" stroke-dasharray="6 3" fill="none"/>"#);
            for p in pts {
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{:.1}" width="5" height="5" fill="{color}"/>"#,
                    sx(mf(p)) - 2.5,
                    sy(p.accuracy) - 2.5
                );
            }
            legend.push((name.to_string(), color));
        }
    }
    for (i, (label, color)) in legend.iter().enumerate() {
        let y = m + 8.0 + 16.0 * i as f64;
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/>"#, w - m - 150.0, y - 9.0);
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{label}</text>"#, w - m - 134.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Independent-model FLOPs multipliers of the MobileNet comparison.
pub const DEFAULT_SCALES: [f64; 6] = [0.1, 0.3, 0.5, 0.7, 0.9, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndependentRow {
    pub scale: f64,
    /// `round(scale × full-model MFLOPs)`.
    pub mflops: u64,
    pub minutes_per_epoch: Option<f64>,
}

/// Measured wall-clock minutes per epoch, one per scale plus MutualNet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasuredTimes {
    pub independent: Vec<f64>,
    pub mutualnet: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccountingReport {
    pub model: String,
    pub full_mflops: f64,
    /// Expected per-iteration training MFLOPs of mutual learning.
    pub mutualnet_mflops: f64,
    pub mutualnet_minutes: Option<f64>,
    pub independent: Vec<IndependentRow>,
    /// `None` when no scales were given.
    pub independent_total: Option<u64>,
    pub independent_minutes_total: Option<f64>,
}

/// Mutual-learning expected training cost next to the summed cost of
/// independently trained models at `scales` × the full model's FLOPs.
pub fn accounting_report(
    model: &ModelSpec,
    sampling: &SamplingSpec,
    scales: &[f64],
    measured: Option<&MeasuredTimes>,
) -> Result<AccountingReport> {
    let full_mflops = model_cost(model, &ModelConfig::full(model))? as f64 / 1e6;
    let mutualnet_mflops = expected_training_cost(model, sampling)? / 1e6;
    if let Some(m) = measured {
        if m.independent.len() != scales.len() {
            return Err(HarnessError::Config(format!(
                "{} measured times for {} scales",
                m.independent.len(),
                scales.len()
            )));
        }
    }
    let independent: Vec<IndependentRow> = scales
        .iter()
        .enumerate()
        .map(|(i, &s)| IndependentRow {
            scale: s,
            mflops: (s * full_mflops).round() as u64,
            minutes_per_epoch: measured.map(|m| m.independent[i]),
        })
        .collect();
    let nonempty = !independent.is_empty();
    Ok(AccountingReport {
        model: model.name.clone(),
        full_mflops,
        mutualnet_mflops,
        mutualnet_minutes: measured.map(|m| m.mutualnet),
        independent_total: nonempty.then(|| independent.iter().map(|r| r.mflops).sum()),
        independent_minutes_total: measured.filter(|_| nonempty).map(|m| m.independent.iter().sum()),
        independent,
    })
}

impl AccountingReport {
    /// Plain-text table: one column per independent scale, then MutualNet.
    pub fn render(&self) -> String {
        let mut header = vec!["".to_string()];
        let mut mflops = vec!["MFLOPs".to_string()];
        let mut minutes = vec!["min/epoch".to_string()];
        for r in &self.independent {
            header.push(format!("x{}", r.scale));
            mflops.push(r.mflops.to_string());
            minutes.push(r.minutes_per_epoch.map_or("-".into(), |m| format!("{m:.1}")));
        }
        header.push("MutualNet".into());
        mflops.push(format!("{:.1}", self.mutualnet_mflops));
        minutes.push(self.mutualnet_minutes.map_or("-".into(), |m| format!("{m:.1}")));
        let mut rows = vec![header, mflops];
        if self.mutualnet_minutes.is_some() {
            rows.push(minutes);
        }
        let cols = rows[0].len();
        let widths: Vec<usize> = (0..cols).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = format!("{} (full model {:.1} MFLOPs)\n", self.model, self.full_mflops);
        for r in &rows {
            let line: Vec<String> = r.iter().zip(&widths).map(|(v, w)| format!("{v:>w$}")).collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        if let Some(t) = self.independent_total {
            let _ = writeln!(out, "independent total: {t} MFLOPs; MutualNet: {:.1} MFLOPs", self.mutualnet_mflops);
        }
        if let Some(t) = self.independent_minutes_total {
            let _ = writeln!(out, "independent total: {t:.1} min/epoch");
        }
        out
    }
}
