//! Deterministic SVG figures for overlap matrices and AUC grids.

use serde::{Deserialize, Serialize};
use std::fmt::Write;

use crate::analysis::{AucGrid, OverlapDiff, OverlapMatrix};

const CELL: f64 = 48.0;
const MARGIN: f64 = 90.0;
const PLOT_W: f64 = 480.0;
const PLOT_H: f64 = 300.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// One generated figure, listed in the report index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub kind: String,
    pub source: String,
    pub path: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportIndex {
    pub figures: Vec<ReportEntry>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, w: f64, h: f64, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        escape(title)
    );
}

/// White-to-blue ramp over [0, 1].
fn shade(v: f64) -> String {
    let t = v.clamp(0.0, 1.0);
    let r = (255.0 - 224.0 * t).round() as u8;
    let g = (255.0 - 136.0 * t).round() as u8;
    let b = (255.0 - 75.0 * t).round() as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Heatmap with row label `i` (the normalizing selection) and column label `j`.
pub fn overlap_heatmap_svg(m: &OverlapMatrix, title: &str) -> String {
    let n = m.labels.len() as f64;
    let (w, h) = (2.0 * MARGIN + n * CELL, 2.0 * MARGIN + n * CELL);
    let mut out = String::new();
    header(&mut out, w, h, title);
    for (i, row) in m.values.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let (x, y) = (MARGIN + j as f64 * CELL, MARGIN + i as f64 * CELL);
            let _ = writeln!(
                out,
                r##"<rect class="cell" x="{x:.1}" y="{y:.1}" width="{CELL:.1}" height="{CELL:.1}" fill="{}" stroke="#444" stroke-width="0.5"/>"##,
                shade(v)
            );
            let color = if v > 0.6 { "white" } else { "black" };
            let _ = writeln!(
                out,
                r#"<text class="value" x="{:.1}" y="{:.1}" text-anchor="middle" dominant-baseline="middle" fill="{color}">{v:.2}</text>"#,
                x + CELL / 2.0,
                y + CELL / 2.0
            );
        }
    }
    for (k, label) in m.labels.iter().enumerate() {
        let c = MARGIN + (k as f64 + 0.5) * CELL;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{c:.1}" text-anchor="end" dominant-baseline="middle">{}</text>"#,
            MARGIN - 6.0,
            escape(label)
        );
        let _ = writeln!(
            out,
            r#"<text x="{c:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            MARGIN - 6.0,
            escape(label)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">selection j</text>"#,
        MARGIN + n * CELL / 2.0,
        MARGIN - 26.0
    );
    let _ = writeln!(
        out,
        r#"<text x="20" y="{:.1}" text-anchor="middle" transform="rotate(-90 20 {:.1})">selection i (normalizer)</text>"#,
        MARGIN + n * CELL / 2.0,
        MARGIN + n * CELL / 2.0
    );
    out.push_str("</svg>\n");
    out
}

struct Axes {
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Axes {
    fn px(&self, x: f64) -> f64 {
        MARGIN + if self.x_max > 0.0 { x / self.x_max * PLOT_W } else { 0.0 }
    }

    fn py(&self, y: f64) -> f64 {
        let span = (self.y_max - self.y_min).max(f64::MIN_POSITIVE);
        MARGIN + PLOT_H - (y - self.y_min) / span * PLOT_H
    }

    fn draw(&self, out: &mut String, x_label: &str, y_label: &str, x_ticks: &[(f64, String)]) {
        let _ = writeln!(
            out,
            r#"<line x1="{m:.1}" y1="{b:.1}" x2="{r:.1}" y2="{b:.1}" stroke="black"/><line x1="{m:.1}" y1="{m:.1}" x2="{m:.1}" y2="{b:.1}" stroke="black"/>"#,
            m = MARGIN,
            b = MARGIN + PLOT_H,
            r = MARGIN + PLOT_W
        );
        for (x, label) in x_ticks {
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                self.px(*x),
                MARGIN + PLOT_H + 16.0,
                escape(label)
            );
        }
        for k in 0..=4 {
            let y = self.y_min + (self.y_max - self.y_min) * k as f64 / 4.0;
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end" dominant-baseline="middle">{y:.2}</text>"#,
                MARGIN - 6.0,
                self.py(y)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            MARGIN + PLOT_W / 2.0,
            MARGIN + PLOT_H + 40.0,
            escape(x_label)
        );
        let cy = MARGIN + PLOT_H / 2.0;
        let _ = writeln!(
            out,
            r#"<text x="24" y="{cy:.1}" text-anchor="middle" transform="rotate(-90 24 {cy:.1})">{}</text>"#,
            escape(y_label)
        );
    }
}

fn polyline(out: &mut String, points: &[(f64, f64)], color: &str, class: &str) {
    if points.is_empty() {
        return;
    }
    let pts: Vec<String> = points.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
    let _ = writeln!(
        out,
        r#"<polyline class="{class}" points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
        pts.join(" ")
    );
    for (x, y) in points {
        let _ = writeln!(out, r#"<circle cx="{x:.1}" cy="{y:.1}" r="2.5" fill="{color}"/>"#);
    }
}

fn legend(out: &mut String, labels: &[&str]) {
    for (k, label) in labels.iter().enumerate() {
        let y = MARGIN + 14.0 * k as f64;
        let x = MARGIN + PLOT_W + 12.0;
        let _ = writeln!(
            out,
            r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            y - 5.0,
            PALETTE[k % PALETTE.len()],
            x + 14.0,
            y + 4.0,
            escape(label)
        );
    }
}

/// Normalized AUC per layer, one polyline per selection; absent layers split the line.
pub fn auc_lines_svg(grid: &AucGrid, title: &str) -> String {
    let axes = Axes { x_max: grid.num_layers.saturating_sub(1) as f64, y_min: 0.5, y_max: 1.0 };
    let mut out = String::new();
    header(&mut out, 2.0 * MARGIN + PLOT_W + 80.0, 2.0 * MARGIN + PLOT_H, title);
    let ticks: Vec<(f64, String)> = (0..grid.num_layers).map(|l| (l as f64, l.to_string())).collect();
    axes.draw(&mut out, "layer", "normalized AUC", &ticks);
    for (k, row) in grid.values.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut run = Vec::new();
        for (l, v) in row.iter().enumerate() {
            match v {
                Some(v) => run.push((axes.px(l as f64), axes.py(*v))),
                None => polyline(&mut out, &std::mem::take(&mut run), color, "auc"),
            }
        }
        polyline(&mut out, &run, color, "auc");
    }
    let labels: Vec<&str> = grid.labels.iter().map(String::as_str).collect();
    legend(&mut out, &labels);
    out.push_str("</svg>\n");
    out
}

/// Trained and random overlaps for each ordered pair, sorted by trained overlap,
/// plus their difference.
pub fn overlap_diff_svg(diffs: &[OverlapDiff], title: &str) -> String {
    let lo = diffs.iter().map(|d| d.difference).fold(0.0f64, f64::min).min(0.0);
    let axes = Axes { x_max: diffs.len().saturating_sub(1) as f64, y_min: lo.floor(), y_max: 1.0 };
    let mut out = String::new();
    header(&mut out, 2.0 * MARGIN + PLOT_W + 80.0, 2.0 * MARGIN + PLOT_H, title);
    axes.draw(&mut out, "ordered pair (sorted by trained overlap)", "overlap", &[]);
    type Series = (&'static str, fn(&OverlapDiff) -> f64);
    let series: [Series; 3] =
        [("trained", |d| d.trained), ("random", |d| d.random), ("difference", |d| d.difference)];
    for (k, (name, f)) in series.iter().enumerate() {
        let pts: Vec<(f64, f64)> = diffs.iter().enumerate().map(|(i, d)| (axes.px(i as f64), axes.py(f(d)))).collect();
        polyline(&mut out, &pts, PALETTE[k], name);
    }
    legend(&mut out, &["trained", "random", "difference"]);
    out.push_str("</svg>\n");
    out
}
