//! CSV learning curves, result tables and SVG plots. All writers are
//! deterministic so identical runs produce identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub seed: u64,
    pub formulation: String,
    pub success_rate: f64,
    pub mean_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub task: String,
    pub regime: String,
    /// Mean success across seeds, percent.
    pub success_pct: f64,
    pub trials: usize,
    pub seeds: usize,
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> HarnessError + '_ {
    move |source| HarnessError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(HarnessError::io(path))
}

/// Columns `step,seed,formulation,success_rate,mean_reward`.
pub fn write_curves(path: &Path, rows: &[CurveRow]) -> Result<(), HarnessError> {
    write_rows(path, rows)
}

pub fn read_curves(path: &Path) -> Result<Vec<CurveRow>, HarnessError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().collect::<Result<_, _>>().map_err(csv_err(path))
}

/// Columns `method,task,regime,success_pct,trials,seeds`.
pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<(), HarnessError> {
    write_rows(path, rows)
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Success rate against environment steps, one line per formulation with
/// the mean across seeds and a band from the minimum to the maximum.
pub fn render_plot(title: &str, rows: &[CurveRow]) -> String {
    let mut series: BTreeMap<&str, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in rows {
        series
            .entry(&r.formulation)
            .or_default()
            .entry(r.step)
            .or_default()
            .push(r.success_rate);
    }
    let max_step = rows.iter().map(|r| r.step).max().unwrap_or(0).max(1) as f64;
    let x = |s: usize| MARGIN + (W - 2.0 * MARGIN) * s as f64 / max_step;
    let y = |v: f64| H - MARGIN - (H - 2.0 * MARGIN) * v;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="25" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let (x0, x1, y0, y1) = (x(0), x(max_step as usize), y(0.0), y(1.0));
    let _ = writeln!(
        svg,
        r#"<path d="M{x0:.2} {y1:.2} L{x0:.2} {y0:.2} L{x1:.2} {y0:.2}" stroke="black" fill="none"/>"#
    );
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-family="sans-serif" font-size="11">{:.2}</text>"#,
            x0 - 6.0,
            y(v) + 4.0,
            v
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{x1:.2}" y="{:.2}" text-anchor="end" font-family="sans-serif" font-size="11">{} steps</text>"#,
        y0 + 18.0,
        max_step as usize
    );
    for (i, (name, points)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let stats: Vec<(usize, f64, f64, f64)> = points
            .iter()
            .map(|(&s, v)| {
                let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (s, v.iter().sum::<f64>() / v.len() as f64, lo, hi)
            })
            .collect();
        let mut band = String::new();
        for (k, &(s, _, _, hi)) in stats.iter().enumerate() {
            let _ = write!(band, "{}{:.2} {:.2} ", if k == 0 { "M" } else { "L" }, x(s), y(hi));
        }
        for &(s, _, lo, _) in stats.iter().rev() {
            let _ = write!(band, "L{:.2} {:.2} ", x(s), y(lo));
        }
        let _ = writeln!(
            svg,
            r#"<path d="{}Z" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            band
        );
        let line: Vec<String> = stats
            .iter()
            .map(|&(s, m, _, _)| format!("{:.2},{:.2}", x(s), y(m)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        let ly = MARGIN + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{ly:.2}" font-family="sans-serif" font-size="12" fill="{color}">{}</text>"#,
            W - MARGIN - 110.0,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `<dir>/<name>.svg` for each named set of curve rows.
pub fn emit_plots(sets: &[(String, Vec<CurveRow>)], dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    let mut paths = Vec::new();
    for (name, rows) in sets {
        let path = dir.join(format!("{name}.svg"));
        fs::write(&path, render_plot(name, rows)).map_err(HarnessError::io(&path))?;
        paths.push(path);
    }
    Ok(paths)
}
