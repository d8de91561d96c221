//! Minimal SVG plotting for diagnostic summaries.
//!
//! Line charts show per-method means across mix rates with per-seed markers;
//! heatmaps show the smoothed sweep surface. Everything is plain shapes and
//! text, written by hand, so plots carry no dependencies and render in any
//! viewer.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Result;

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 160.0;
const MARGIN_T: f64 = 48.0;
const MARGIN_B: f64 = 56.0;

const PALETTE: &[&str] = &[
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf",
];

pub struct Series {
    pub name: String,
    /// Mean line vertices.
    pub line: Vec<(f64, f64)>,
    /// Individual observations drawn as hollow markers.
    pub points: Vec<(f64, f64)>,
}

struct Frame {
    x_lo: f64,
    x_hi: f64,
    y_lo: f64,
    y_hi: f64,
}

impl Frame {
    fn from_points<'a>(pts: impl Iterator<Item = &'a (f64, f64)>) -> Frame {
        let mut f = Frame {
            x_lo: f64::INFINITY,
            x_hi: f64::NEG_INFINITY,
            y_lo: f64::INFINITY,
            y_hi: f64::NEG_INFINITY,
        };
        for &(x, y) in pts {
            f.x_lo = f.x_lo.min(x);
            f.x_hi = f.x_hi.max(x);
            f.y_lo = f.y_lo.min(y);
            f.y_hi = f.y_hi.max(y);
        }
        if !f.x_lo.is_finite() {
            f = Frame {
                x_lo: 0.0,
                x_hi: 1.0,
                y_lo: 0.0,
                y_hi: 1.0,
            };
        }
        if f.x_hi - f.x_lo < 1e-12 {
            f.x_hi = f.x_lo + 1.0;
        }
        if f.y_hi - f.y_lo < 1e-12 {
            f.y_hi = f.y_lo + 1.0;
        }
        // Breathing room on the value axis.
        let pad = 0.06 * (f.y_hi - f.y_lo);
        f.y_lo -= pad;
        f.y_hi += pad;
        f
    }

    fn x(&self, v: f64) -> f64 {
        MARGIN_L + (v - self.x_lo) / (self.x_hi - self.x_lo) * (WIDTH - MARGIN_L - MARGIN_R)
    }

    fn y(&self, v: f64) -> f64 {
        HEIGHT - MARGIN_B - (v - self.y_lo) / (self.y_hi - self.y_lo) * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

fn ticks(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    (0..count)
        .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
        .collect()
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if (1e-3..1e4).contains(&a) {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.1e}")
    }
}

fn svg_header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"26\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(out: &mut String, frame: &Frame, x_label: &str, y_label: &str) {
    let (x0, x1) = (MARGIN_L, WIDTH - MARGIN_R);
    let (y0, y1) = (HEIGHT - MARGIN_B, MARGIN_T);
    let _ = write!(
        out,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"#333\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"#333\"/>\n"
    );
    for t in ticks(frame.x_lo, frame.x_hi, 6) {
        let x = frame.x(t);
        let _ = write!(
            out,
            "<line x1=\"{x}\" y1=\"{y0}\" x2=\"{x}\" y2=\"{}\" stroke=\"#333\"/>\n\
             <text x=\"{x}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            y0 + 5.0,
            y0 + 18.0,
            fmt_tick(t)
        );
    }
    for t in ticks(frame.y_lo, frame.y_hi, 6) {
        let y = frame.y(t);
        let _ = write!(
            out,
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{x0}\" y2=\"{y}\" stroke=\"#333\"/>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
            x0 - 5.0,
            x0 - 8.0,
            y + 4.0,
            fmt_tick(t)
        );
    }
    let _ = write!(
        out,
        "<text x=\"{}\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"18\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\" \
         transform=\"rotate(-90 18 {})\">{}</text>\n",
        (x0 + x1) / 2.0,
        HEIGHT - 16.0,
        escape(x_label),
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

/// Mean lines with per-observation markers, one color per series.
pub fn line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<()> {
    let frame = Frame::from_points(series.iter().flat_map(|s| s.line.iter().chain(&s.points)));
    let mut out = svg_header(title);
    axes(&mut out, &frame, x_label, y_label);
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if !s.line.is_empty() {
            let pts: Vec<String> = s
                .line
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", frame.x(x), frame.y(y)))
                .collect();
            let _ = write!(
                out,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
                pts.join(" ")
            );
        }
        for &(x, y) in &s.points {
            let _ = write!(
                out,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"none\" stroke=\"{color}\"/>\n",
                frame.x(x),
                frame.y(y)
            );
        }
        let ly = MARGIN_T + 18.0 * i as f64;
        let _ = write!(
            out,
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"12\">{}</text>\n",
            WIDTH - MARGIN_R + 12.0,
            WIDTH - MARGIN_R + 36.0,
            WIDTH - MARGIN_R + 42.0,
            ly + 4.0,
            escape(&s.name)
        );
    }
    out.push_str("</svg>\n");
    std::fs::write(path, out)?;
    Ok(())
}

/// Colored cells over an irregular lattice; low values map to blue, high to
/// red. Cell size derives from the smallest positive spacing on each axis.
pub fn heatmap(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    cells: &[(f64, f64, f64)],
) -> Result<()> {
    anyhow::ensure!(!cells.is_empty(), "heatmap needs at least one cell");
    let pts: Vec<(f64, f64)> = cells.iter().map(|&(x, y, _)| (x, y)).collect();
    let frame = Frame::from_points(pts.iter());
    let (v_lo, v_hi) = cells.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY),
        |(lo, hi), &(_, _, v)| (lo.min(v), hi.max(v)),
    );
    let span = if v_hi - v_lo < 1e-12 { 1.0 } else { v_hi - v_lo };
    let spacing = |mut vals: Vec<f64>| -> f64 {
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        vals.windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    };
    let dx = spacing(cells.iter().map(|c| c.0).collect());
    let dy = spacing(cells.iter().map(|c| c.1).collect());
    let w = if dx.is_finite() {
        (frame.x(frame.x_lo + dx) - frame.x(frame.x_lo)).max(2.0)
    } else {
        12.0
    };
    let h = if dy.is_finite() {
        (frame.y(frame.y_lo) - frame.y(frame.y_lo + dy)).max(2.0)
    } else {
        12.0
    };

    let mut out = svg_header(title);
    axes(&mut out, &frame, x_label, y_label);
    for &(x, y, v) in cells {
        let t = (v - v_lo) / span;
        let r = (t * 255.0).round() as u8;
        let b = ((1.0 - t) * 255.0).round() as u8;
        let _ = write!(
            out,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" \
             fill=\"rgb({r},80,{b})\" fill-opacity=\"0.85\"/>\n",
            frame.x(x) - w / 2.0,
            frame.y(y) - h / 2.0,
            w,
            h
        );
    }
    let _ = write!(
        out,
        "<text x=\"{}\" y=\"{}\" font-size=\"12\">low {} / high {}</text>\n",
        WIDTH - MARGIN_R + 12.0,
        MARGIN_T,
        fmt_tick(v_lo),
        fmt_tick(v_hi)
    );
    out.push_str("</svg>\n");
    std::fs::write(path, out)?;
    Ok(())
}
