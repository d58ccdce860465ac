//! Plain-text artifacts: metrics CSV, SVG line plots and the run manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use pointssm_core::training::MetricRow;
use serde::Serialize;

use crate::error::{CliError, CliResult};

pub const METRICS_HEADER: &str = "epoch,split,metric,value";

/// One row per record; values use the shortest round-trip decimal form.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.epoch, r.split, r.metric, r.value);
    }
    out
}

/// Inverse of [`metrics_csv`].
pub fn parse_metrics_csv(text: &str) -> CliResult<Vec<MetricRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_HEADER => {}
        _ => {
            return Err(CliError::data(format!(
                "metrics CSV: expected header `{METRICS_HEADER}`"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || CliError::data(format!("metrics CSV line {}: `{line}`", i + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        rows.push(MetricRow {
            epoch: f[0].trim().parse().map_err(|_| bad())?,
            split: f[1].trim().to_string(),
            metric: f[2].trim().to_string(),
            value: f[3].trim().parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

/// Static line plot of one or more `(label, values)` series against epoch.
pub fn line_plot_svg(title: &str, series: &[(String, Vec<f64>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 56.0;
    const COLORS: [&str; 6] = [
        "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
    ];
    let vals = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite());
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    let (lo, hi) = if lo.is_finite() {
        (lo, if hi > lo { hi } else { lo + 1.0 })
    } else {
        (0.0, 1.0)
    };
    let n = series
        .iter()
        .map(|(_, v)| v.len())
        .max()
        .unwrap_or(0)
        .max(2);
    let x = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / (n - 1) as f64;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * (v - lo) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} L{PAD} {b} L{r} {b}" fill="none" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    for (v, anchor) in [(hi, PAD + 4.0), (lo, H - PAD)] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{anchor:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.4}</text>"#,
            PAD - 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{PAD}" y="{}" font-family="sans-serif" font-size="11">1</text>"#,
        H - PAD + 16.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">epoch {n}</text>"#,
        W - PAD,
        H - PAD + 16.0
    );
    for (k, (label, v)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = v
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| format!("{:.2},{:.2}", x(i), y(v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="{color}" text-anchor="end">{}</text>"#,
            W - PAD,
            PAD + 16.0 * (k as f64 + 1.0),
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Per-epoch series found in `rows`, as plot input.
pub fn plot_series(rows: &[MetricRow]) -> Vec<(String, Vec<f64>)> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows {
        let k = (r.split.clone(), r.metric.clone());
        if r.metric != "lr" && !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(split, metric)| {
            let v = rows
                .iter()
                .filter(|r| r.split == split && r.metric == metric)
                .map(|r| r.value)
                .collect();
            (format!("{split} {metric}"), v)
        })
        .collect()
}

/// Reproducibility record written next to every run's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub command: &'a str,
    pub build_id: &'a str,
    pub config_sha256: String,
    pub seeds: Vec<(&'a str, u64)>,
    pub outputs: Vec<String>,
}

pub const BUILD_ID: &str = env!("POINTSSM_BUILD_ID");

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_manifest(path: &Path, m: &RunManifest<'_>) -> CliResult<()> {
    let text = serde_json::to_string_pretty(m).map_err(|e| CliError::data(e.to_string()))?;
    write_text(path, &(text + "\n"))
}
