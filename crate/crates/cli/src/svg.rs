//! Dependency-free SVG rendering for run artifacts.
//!
//! All three renderers are pure functions of their inputs with fixed
//! formatting (two-decimal pixel coordinates, shortest-form data labels), so
//! the same input always produces byte-identical SVG.

use gemflow::flow::RunRecord;
use gemflow::mat::Matrix;
use gemflow::metrics::DensityGrid;
use gemflow::{Error, Result};

const SCATTER_SIZE: f64 = 640.0;
const MARGIN: f64 = 42.0;

fn svg_open(width: f64, height: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"#ffffff\"/>\n",
        w = width,
        h = height
    )
}

/// One translucent circle per point over a 5%-inflated bounding box.
pub fn scatter_svg(points: &Matrix) -> Result<String> {
    if points.cols() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "scatter plots draw 2D points, got {} columns",
            points.cols()
        )));
    }
    if points.rows() == 0 {
        return Err(Error::InvalidArgument("nothing to plot: empty batch".into()));
    }
    let (lo, hi) = points.bounding_box(0.05);
    let plot = SCATTER_SIZE - 2.0 * MARGIN;
    let sx = |x: f64| MARGIN + (x - lo[0]) / (hi[0] - lo[0]) * plot;
    let sy = |y: f64| MARGIN + (1.0 - (y - lo[1]) / (hi[1] - lo[1])) * plot;

    let mut s = svg_open(SCATTER_SIZE, SCATTER_SIZE);
    s.push_str(&format!(
        "<rect x=\"{m}\" y=\"{m}\" width=\"{p:.2}\" height=\"{p:.2}\" fill=\"none\" stroke=\"#444444\"/>\n",
        m = MARGIN,
        p = plot
    ));
    for r in points.iter_rows() {
        s.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.2\" fill=\"#2266aa\" fill-opacity=\"0.55\"/>\n",
            sx(r[0]),
            sy(r[1])
        ));
    }
    s.push_str(&axis_labels(lo[0], hi[0], lo[1], hi[1], SCATTER_SIZE));
    s.push_str("</svg>\n");
    Ok(s)
}

fn axis_labels(x0: f64, x1: f64, y0: f64, y1: f64, size: f64) -> String {
    format!(
        "<text x=\"{m}\" y=\"{b}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#333333\">{x0}</text>\n\
         <text x=\"{r}\" y=\"{b}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#333333\" text-anchor=\"end\">{x1}</text>\n\
         <text x=\"{m}\" y=\"{t}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#333333\">{y1}</text>\n\
         <text x=\"{lx:.2}\" y=\"{ly:.2}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#333333\">{y0}</text>\n",
        m = MARGIN,
        b = size - MARGIN + 14.0,
        r = size - MARGIN,
        t = MARGIN - 6.0,
        lx = MARGIN - 36.0,
        ly = size - MARGIN,
        x0 = x0,
        x1 = x1,
        y0 = y0,
        y1 = y1,
    )
}

/// Maps `t` in [0,1] through the hot ramp: black, through red and orange,
/// to white.
fn hot(t: f64) -> (u8, u8, u8) {
    let c = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    (c(3.0 * t), c(3.0 * t - 1.0), c(3.0 * t - 2.0))
}

/// One rectangle per grid cell, colored by the hot ramp scaled to the grid
/// maximum.
pub fn heatmap_svg(grid: &DensityGrid) -> String {
    let spec = grid.spec;
    let plot = SCATTER_SIZE - 2.0 * MARGIN;
    let cw = plot / spec.nx as f64;
    let ch = plot / spec.ny as f64;
    let vmax = grid
        .values()
        .iter()
        .cloned()
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);

    let mut s = svg_open(SCATTER_SIZE, SCATTER_SIZE);
    for iy in 0..spec.ny {
        // Grid rows grow upward; SVG y grows downward.
        let py = MARGIN + (spec.ny - 1 - iy) as f64 * ch;
        for ix in 0..spec.nx {
            let (r, g, b) = hot(grid.value(ix, iy) / vmax);
            s.push_str(&format!(
                "<rect class=\"cell\" x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"rgb({},{},{})\"/>\n",
                MARGIN + ix as f64 * cw,
                py,
                cw + 0.03,
                ch + 0.03,
                r,
                g,
                b
            ));
        }
    }
    s.push_str(&format!(
        "<rect x=\"{m}\" y=\"{m}\" width=\"{p:.2}\" height=\"{p:.2}\" fill=\"none\" stroke=\"#444444\"/>\n",
        m = MARGIN,
        p = plot
    ));
    s.push_str(&axis_labels(
        spec.x_range.0,
        spec.x_range.1,
        spec.y_range.0,
        spec.y_range.1,
        SCATTER_SIZE,
    ));
    s.push_str("</svg>\n");
    s
}

struct Series {
    label: &'static str,
    color: &'static str,
    points: Vec<(f64, f64)>,
}

/// Stacked per-series panels of the diagnostics in a record: fitting loss,
/// gradient norm, and the distance columns, each against iteration. Columns
/// that are NaN throughout are omitted; an all-NaN record is an error.
pub fn trace_svg(record: &RunRecord) -> Result<String> {
    let pick = |label, color, get: fn(&gemflow::flow::DiagRow) -> f64| Series {
        label,
        color,
        points: record
            .rows()
            .iter()
            .filter(|r| get(r).is_finite())
            .map(|r| (r.iteration as f64, get(r)))
            .collect(),
    };
    let series: Vec<Series> = [
        pick("fitting loss", "#2266aa", |r| r.loss),
        pick("gradient norm", "#dd7722", |r| r.grad_norm),
        pick("w2", "#338855", |r| r.w2),
        pick("mmd2", "#aa3377", |r| r.mmd),
    ]
    .into_iter()
    .filter(|s| !s.points.is_empty())
    .collect();
    if series.is_empty() {
        return Err(Error::InvalidArgument(
            "record has no finite diagnostics to trace".into(),
        ));
    }

    let width = 720.0;
    let panel_h = 180.0;
    let height = MARGIN + series.len() as f64 * panel_h + MARGIN;
    let mut s = svg_open(width, height);
    for (k, ser) in series.iter().enumerate() {
        let top = MARGIN + k as f64 * panel_h;
        let bottom = top + panel_h - 36.0;
        let plot_h = bottom - top;
        let plot_w = width - 2.0 * MARGIN;
        let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in &ser.points {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if x1 <= x0 {
            x1 = x0 + 1.0;
        }
        if y1 <= y0 {
            y1 = y0 + y0.abs().max(1.0) * 1e-3;
        }
        let pad = 0.05 * (y1 - y0);
        let (ylo, yhi) = (y0 - pad, y1 + pad);
        let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * plot_w;
        let sy = |y: f64| top + (1.0 - (y - ylo) / (yhi - ylo)) * plot_h;
        s.push_str(&format!(
            "<rect x=\"{m}\" y=\"{t:.2}\" width=\"{w:.2}\" height=\"{h:.2}\" fill=\"none\" stroke=\"#444444\"/>\n",
            m = MARGIN,
            t = top,
            w = plot_w,
            h = plot_h
        ));
        let pts: Vec<String> = ser
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if pts.len() == 1 {
            let (x, y) = ser.points[0];
            s.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\"/>\n",
                sx(x),
                sy(y),
                ser.color
            ));
        } else {
            s.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>\n",
                pts.join(" "),
                ser.color
            ));
        }
        s.push_str(&format!(
            "<text x=\"{x}\" y=\"{y:.2}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"#222222\">{label}</text>\n",
            x = MARGIN + 6.0,
            y = top + 14.0,
            label = ser.label
        ));
        s.push_str(&format!(
            "<text x=\"{x}\" y=\"{y:.2}\" font-family=\"sans-serif\" font-size=\"10\" fill=\"#555555\">[{lo}, {hi}] over iterations {a}..{b}</text>\n",
            x = MARGIN + 6.0,
            y = bottom + 14.0,
            lo = y0,
            hi = y1,
            a = x0,
            b = x1
        ));
    }
    s.push_str("</svg>\n");
    Ok(s)
}
