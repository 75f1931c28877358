//! Deterministic SVG plots for training logs and comparison reports.
//!
//! Output bytes are a pure function of the input data: coordinates are
//! printed at fixed precision, nothing is timestamped, and element order
//! follows input order. Rendering the same data twice yields identical
//! files, which the CLI checks by double-rendering.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{EngramError, Result};
use crate::eval::ComparisonReport;
use crate::train::TrainRecord;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 62.0;
const MARGIN_R: f64 = 18.0;
const MARGIN_T: f64 = 34.0;
const MARGIN_B: f64 = 44.0;

fn fmt(v: f64) -> String {
    format!("{v:.3}")
}

fn axis_label(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 1e4 || v.abs() < 1e-3 {
        format!("{v:.2e}")
    } else {
        format!("{v:.4}")
    }
}

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    /// Degenerate ranges are widened symmetrically so points stay visible.
    fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Self {
        let (x_min, x_max) = pad_range(x_min, x_max);
        let (y_min, y_max) = pad_range(y_min, y_max);
        Self {
            x_min,
            x_max,
            y_min,
            y_max,
        }
    }

    fn x(&self, v: f64) -> f64 {
        MARGIN_L + (v - self.x_min) / (self.x_max - self.x_min) * (WIDTH - MARGIN_L - MARGIN_R)
    }

    fn y(&self, v: f64) -> f64 {
        HEIGHT - MARGIN_B
            - (v - self.y_min) / (self.y_max - self.y_min) * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

fn pad_range(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        (lo, hi)
    } else {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.5 };
        (lo - pad, hi + pad)
    }
}

fn svg_header(title: &str) -> String {
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"{tx}\" y=\"22\" text-anchor=\"middle\" ",
            "font-family=\"monospace\" font-size=\"14\">{title}</text>\n"
        ),
        w = WIDTH,
        h = HEIGHT,
        tx = WIDTH / 2.0,
        title = title
    )
}

fn svg_axes(frame: &Frame, x_label: &str, y_label: &str) -> String {
    let x0 = fmt(MARGIN_L);
    let x1 = fmt(WIDTH - MARGIN_R);
    let y0 = fmt(HEIGHT - MARGIN_B);
    let y1 = fmt(MARGIN_T);
    let mut s = String::new();
    s.push_str(&format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n"
    ));
    s.push_str(&format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n"
    ));
    s.push_str(&format!(
        "<text x=\"{x0}\" y=\"{}\" text-anchor=\"middle\" font-family=\"monospace\" \
         font-size=\"11\">{}</text>\n",
        fmt(HEIGHT - MARGIN_B + 16.0),
        axis_label(frame.x_min)
    ));
    s.push_str(&format!(
        "<text x=\"{x1}\" y=\"{}\" text-anchor=\"middle\" font-family=\"monospace\" \
         font-size=\"11\">{}</text>\n",
        fmt(HEIGHT - MARGIN_B + 16.0),
        axis_label(frame.x_max)
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"monospace\" \
         font-size=\"11\">{}</text>\n",
        fmt(MARGIN_L - 6.0),
        fmt(HEIGHT - MARGIN_B),
        axis_label(frame.y_min)
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"monospace\" \
         font-size=\"11\">{}</text>\n",
        fmt(MARGIN_L - 6.0),
        fmt(MARGIN_T + 4.0),
        axis_label(frame.y_max)
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"monospace\" \
         font-size=\"12\">{x_label}</text>\n",
        fmt((MARGIN_L + WIDTH - MARGIN_R) / 2.0),
        fmt(HEIGHT - 8.0)
    ));
    s.push_str(&format!(
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" font-family=\"monospace\" \
         font-size=\"12\" transform=\"rotate(-90 14 {})\">{y_label}</text>\n",
        fmt(HEIGHT / 2.0),
        fmt(HEIGHT / 2.0)
    ));
    s
}

/// Loss-vs-step polyline from a training log.
pub fn render_loss_curve(records: &[TrainRecord], title: &str) -> Result<String> {
    if records.is_empty() {
        return Err(EngramError::MalformedReport("empty training log".into()));
    }
    if records.iter().any(|r| !r.loss.is_finite()) {
        return Err(EngramError::MalformedReport(
            "non-finite loss in training log".into(),
        ));
    }
    let x_min = records.first().map(|r| r.step as f64).unwrap();
    let x_max = records.last().map(|r| r.step as f64).unwrap();
    let y_min = records.iter().map(|r| r.loss).fold(f64::INFINITY, f64::min);
    let y_max = records
        .iter()
        .map(|r| r.loss)
        .fold(f64::NEG_INFINITY, f64::max);
    let frame = Frame::new(x_min, x_max, y_min.min(0.0), y_max);
    let mut svg = svg_header(title);
    svg.push_str(&svg_axes(&frame, "step", "loss"));
    let points: Vec<String> = records
        .iter()
        .map(|r| format!("{},{}", fmt(frame.x(r.step as f64)), fmt(frame.y(r.loss))))
        .collect();
    svg.push_str(&format!(
        "<polyline fill=\"none\" stroke=\"#1f5fa8\" stroke-width=\"1.5\" points=\"{}\"/>\n",
        points.join(" ")
    ));
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Histogram of base-vs-engram distances, trigger and control prompts in
/// separate colors.
pub fn render_distance_histogram(report: &ComparisonReport, title: &str) -> Result<String> {
    if report.records.is_empty() {
        return Err(EngramError::MalformedReport("empty report".into()));
    }
    let max_d = report
        .records
        .iter()
        .map(|r| r.distance)
        .fold(0.0f64, f64::max);
    let bins = 20usize;
    let hi = if max_d > 0.0 { max_d } else { 1.0 };
    let mut trig = vec![0usize; bins];
    let mut ctrl = vec![0usize; bins];
    for r in &report.records {
        let mut b = ((r.distance / hi) * bins as f64) as usize;
        if b >= bins {
            b = bins - 1;
        }
        if r.has_trigger {
            trig[b] += 1;
        } else {
            ctrl[b] += 1;
        }
    }
    let y_max = trig
        .iter()
        .zip(&ctrl)
        .map(|(a, b)| a + b)
        .max()
        .unwrap_or(1) as f64;
    let frame = Frame::new(0.0, hi, 0.0, y_max);
    let mut svg = svg_header(title);
    svg.push_str(&svg_axes(&frame, "distance", "count"));
    let bin_w = (WIDTH - MARGIN_L - MARGIN_R) / bins as f64;
    for b in 0..bins {
        let x = MARGIN_L + b as f64 * bin_w;
        // Control bars sit under trigger bars so silent prompts stay
        // visible as the spike at zero.
        let mut y_base = HEIGHT - MARGIN_B;
        for (count, color) in [(ctrl[b], "#777777"), (trig[b], "#c23b22")] {
            if count == 0 {
                continue;
            }
            let h = (HEIGHT - MARGIN_T - MARGIN_B) * count as f64 / y_max;
            y_base -= h;
            svg.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{color}\" \
                 stroke=\"white\" stroke-width=\"0.5\"/>\n",
                fmt(x),
                fmt(y_base),
                fmt(bin_w),
                fmt(h),
            ));
        }
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" \
         fill=\"#777777\">control</text>\n",
        fmt(WIDTH - MARGIN_R - 110.0),
        fmt(MARGIN_T + 12.0)
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" \
         fill=\"#c23b22\">trigger</text>\n",
        fmt(WIDTH - MARGIN_R - 110.0),
        fmt(MARGIN_T + 26.0)
    ));
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Parse a line-delimited training log written by the CLI.
pub fn read_train_log(path: &Path) -> Result<Vec<TrainRecord>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| EngramError::MalformedReport(format!("line {}: {e}", lineno + 1)))?,
        );
    }
    if out.is_empty() {
        return Err(EngramError::MalformedReport("empty training log".into()));
    }
    Ok(out)
}
