//! Smoothed learning curves as SVG.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::CliError;
use crate::harness::metrics::fmt_f64;
use crate::harness::Table;

/// `s_0 = x_0`, `s_t = c·s_{t−1} + (1−c)·x_t`.
pub fn ema(xs: &[f64], c: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    for (i, &x) in xs.iter().enumerate() {
        out.push(if i == 0 { x } else { c * out[i - 1] + (1.0 - c) * x });
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub timesteps: Vec<f64>,
    pub raw: Vec<f64>,
    pub smoothed: Vec<f64>,
}

/// Reads `metric` from each run's metrics.csv, skipping empty cells.
pub fn load_series(dirs: &[PathBuf], metric: &str, smooth: f64) -> Result<Vec<Series>, CliError> {
    let mut out = Vec::new();
    for dir in dirs {
        let path = dir.join("metrics.csv");
        if !path.is_file() {
            return Err(CliError::Missing(path.display().to_string()));
        }
        let table = Table::read(&path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
        let available: Vec<String> = table.columns.iter().filter(|c| *c != "timestep").cloned().collect();
        let (Some(ts), Some(values)) = (table.column("timestep"), table.column(metric)) else {
            return Err(CliError::BadMetric {
                metric: metric.to_string(),
                available,
            });
        };
        if metric == "timestep" {
            return Err(CliError::BadMetric {
                metric: metric.to_string(),
                available,
            });
        }
        let (timesteps, raw): (Vec<f64>, Vec<f64>) = ts
            .into_iter()
            .zip(values)
            .filter_map(|(t, v)| Some((t?, v?)))
            .unzip();
        let smoothed = ema(&raw, smooth);
        let label = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        out.push(Series {
            label,
            timesteps,
            raw,
            smoothed,
        });
    }
    Ok(out)
}

pub fn smoothed_csv(series: &[Series]) -> String {
    let mut out = String::from("run,timestep,raw,smoothed\n");
    for s in series {
        for i in 0..s.raw.len() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                s.label,
                s.timesteps[i],
                fmt_f64(s.raw[i]),
                fmt_f64(s.smoothed[i])
            );
        }
    }
    out
}

const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn svg(series: &[Series], metric: &str) -> String {
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (70.0, 180.0, 30.0, 50.0);
    let points = series.iter().flat_map(|s| s.timesteps.iter().zip(&s.smoothed));
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (&x, &y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let px = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            px(xv),
            top + ph + 16.0,
            tick(xv)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            py(yv) + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">timestep</text>"#,
        left + pw / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(metric)
    );
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .timesteps
            .iter()
            .zip(&s.smoothed)
            .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 14.0 + 18.0 * i as f64;
        let lx = w - right + 12.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx}" y1="{:.1}" x2="{}" y2="{:.1}" stroke="{color}" stroke-width="2"/>"#,
            ly - 4.0,
            lx + 20.0,
            ly - 4.0
        );
        let _ = writeln!(out, r#"<text x="{}" y="{ly:.1}">{}</text>"#, lx + 26.0, escape(&s.label));
    }
    out.push_str("</svg>\n");
    out
}

fn tick(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

/// Writes the SVG to `out` and the smoothed series next to it as CSV.
pub fn plot(dirs: &[PathBuf], metric: &str, smooth: f64, out: &Path) -> Result<PathBuf, CliError> {
    if !(0.0..1.0).contains(&smooth) {
        return Err(CliError::Usage(format!("--smooth must be in [0, 1), got {smooth}")));
    }
    let series = load_series(dirs, metric, smooth)?;
    let write = |p: &Path, s: String| std::fs::write(p, s).map_err(|e| CliError::Other(format!("{}: {e}", p.display())));
    write(out, svg(&series, metric))?;
    let csv = out.with_extension("csv");
    write(&csv, smoothed_csv(&series))?;
    Ok(csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_cases() {
        assert_eq!(ema(&[3.0, -1.0, 7.5], 0.0), vec![3.0, -1.0, 7.5]);
        assert_eq!(ema(&[2.5; 5], 0.98), vec![2.5; 5]);
        let s = ema(&[0.0, 1.0], 0.98);
        assert!((s[1] - 0.02).abs() < 1e-15);
    }
}
