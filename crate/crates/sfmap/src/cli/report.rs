//! Deterministic report artifacts: a metrics CSV and simple SVG plots.

use super::metrics::{Metrics, AVAIL_THRESHOLDS_M, RECALL_RADII_M};
use std::fmt::Write;

pub const METRICS_HEADER: &str = "metric,value";

/// Metrics as a two-column CSV; headers only when there are no metrics.
pub fn metrics_csv(metrics: Option<&Metrics>) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    let Some(m) = metrics else {
        return out;
    };
    writeln!(out, "queries,{}", m.queries).unwrap();
    for (r, v) in RECALL_RADII_M.iter().zip(m.recall.iter()) {
        writeln!(out, "recall@{r}m,{v:.6}").unwrap();
    }
    for (e, v) in AVAIL_THRESHOLDS_M.iter().zip(m.availability.iter()) {
        writeln!(out, "availability@{e}m,{v:.6}").unwrap();
    }
    writeln!(out, "coarse_rmse_m,{:.6}", m.coarse_rmse).unwrap();
    writeln!(out, "coarse_rmse_count,{}", m.coarse_rmse_count).unwrap();
    writeln!(out, "fine_rmse_m,{:.6}", m.fine_rmse).unwrap();
    writeln!(out, "fine_rmse_count,{}", m.fine_rmse_count).unwrap();
    out
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const MARGIN: f64 = 50.0;

fn svg_open(out: &mut String, title: &str) {
    writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\">"
    )
    .unwrap();
    writeln!(
        out,
        "<text x=\"{:.1}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>",
        W / 2.0
    )
    .unwrap();
    writeln!(
        out,
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{:.1}\" height=\"{:.1}\" \
         fill=\"none\" stroke=\"black\"/>",
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    )
    .unwrap();
}

fn axis_labels(out: &mut String, xmin: f64, xmax: f64, ymin: f64, ymax: f64) {
    writeln!(
        out,
        "<text x=\"{MARGIN}\" y=\"{:.1}\" font-size=\"11\">{xmin:.3}</text>",
        H - MARGIN + 16.0
    )
    .unwrap();
    writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"11\">{xmax:.3}</text>",
        W - MARGIN,
        H - MARGIN + 16.0
    )
    .unwrap();
    writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"11\">{ymin:.3}</text>",
        MARGIN - 4.0,
        H - MARGIN
    )
    .unwrap();
    writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"11\">{ymax:.3}</text>",
        MARGIN - 4.0,
        MARGIN + 10.0
    )
    .unwrap();
}

/// Error-versus-time line plot. Non-finite samples are skipped; the axis
/// ranges are the finite data extremes.
pub fn error_plot_svg(title: &str, points: &[(f64, f64)]) -> String {
    let finite: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|(t, e)| t.is_finite() && e.is_finite())
        .collect();
    let mut out = String::new();
    svg_open(&mut out, title);
    if !finite.is_empty() {
        let xmin = finite.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let xmax = finite.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let ymin = finite.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let ymax = finite.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let xspan = (xmax - xmin).max(1e-9);
        let yspan = (ymax - ymin).max(1e-9);
        let px = |x: f64| MARGIN + (x - xmin) / xspan * (W - 2.0 * MARGIN);
        let py = |y: f64| H - MARGIN - (y - ymin) / yspan * (H - 2.0 * MARGIN);
        let mut path = String::new();
        for (i, (x, y)) in finite.iter().enumerate() {
            let cmd = if i == 0 { 'M' } else { 'L' };
            write!(path, "{cmd}{:.2},{:.2} ", px(*x), py(*y)).unwrap();
        }
        writeln!(
            out,
            "<path d=\"{}\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\"/>",
            path.trim_end()
        )
        .unwrap();
        axis_labels(&mut out, xmin, xmax, ymin, ymax);
    }
    out.push_str("</svg>\n");
    out
}

/// Labeled bar plot (e.g. recall per radius). Bar heights scale to the data
/// maximum; the y-axis labels carry the extremes.
pub fn bar_plot_svg(title: &str, bars: &[(String, f64)]) -> String {
    let mut out = String::new();
    svg_open(&mut out, title);
    if !bars.is_empty() {
        let ymax = bars.iter().map(|b| b.1).fold(f64::NEG_INFINITY, f64::max).max(1e-9);
        let span = W - 2.0 * MARGIN;
        let slot = span / bars.len() as f64;
        for (i, (label, v)) in bars.iter().enumerate() {
            let h = (v / ymax).max(0.0) * (H - 2.0 * MARGIN);
            let x = MARGIN + i as f64 * slot + 0.15 * slot;
            writeln!(
                out,
                "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{h:.2}\" \
                 fill=\"steelblue\"/>",
                H - MARGIN - h,
                0.7 * slot
            )
            .unwrap();
            writeln!(
                out,
                "<text x=\"{:.2}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"11\">{label}</text>",
                x + 0.35 * slot,
                H - MARGIN + 16.0
            )
            .unwrap();
        }
        axis_labels(&mut out, 0.0, bars.len() as f64, 0.0, ymax);
    }
    out.push_str("</svg>\n");
    out
}
