//! Minimal SVG emitters for scatter, quiver and loss-curve plots.

use std::fmt::Write;

use crate::evalbench::{Rect, ScoreField};
use crate::numcore::Tensor;
use crate::train::LossCurve;

const SIZE: f64 = 480.0;
const MARGIN: f64 = 40.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x_min) / (self.x_max - self.x_min) * (SIZE - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        SIZE - MARGIN - (y - self.y_min) / (self.y_max - self.y_min) * (SIZE - 2.0 * MARGIN)
    }
}

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        SIZE / 2.0,
        escape(title)
    );
    s
}

fn axes(s: &mut String, f: &Frame) {
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{w}" height="{w}" fill="none" stroke="black"/>"#,
        w = SIZE - 2.0 * MARGIN
    );
    let labels = [
        (MARGIN, SIZE - MARGIN + 14.0, "start", f.x_min),
        (SIZE - MARGIN, SIZE - MARGIN + 14.0, "end", f.x_max),
        (MARGIN - 4.0, SIZE - MARGIN, "end", f.y_min),
        (MARGIN - 4.0, MARGIN + 10.0, "end", f.y_max),
    ];
    for (x, y, anchor, v) in labels {
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{y:.1}" font-family="sans-serif" font-size="10" text-anchor="{anchor}">{}</text>"#,
            short(v)
        );
    }
}

fn short(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Points coloured by `labels` (first two coordinates only).
pub fn scatter(points: &Tensor, labels: &[usize], rect: Rect, title: &str) -> String {
    let f = Frame {
        x_min: rect.x_min,
        x_max: rect.x_max,
        y_min: rect.y_min,
        y_max: rect.y_max,
    };
    let mut s = header(title);
    axes(&mut s, &f);
    for (i, row) in points.row_iter().enumerate() {
        let (x, y) = (row[0], row.get(1).copied().unwrap_or(0.0));
        if x < f.x_min || x > f.x_max || y < f.y_min || y > f.y_max {
            continue;
        }
        let c = PALETTE[labels.get(i).copied().unwrap_or(0) % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="1.2" fill="{c}" fill-opacity="0.5"/>"#,
            f.px(x),
            f.py(y)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Arrows of equal length showing the field direction, shaded by magnitude.
pub fn quiver(field: &ScoreField, title: &str) -> String {
    let f = Frame {
        x_min: field.xs[0],
        x_max: *field.xs.last().unwrap(),
        y_min: field.ys[0],
        y_max: *field.ys.last().unwrap(),
    };
    let mut s = header(title);
    axes(&mut s, &f);
    let cell = (SIZE - 2.0 * MARGIN) / (field.xs.len().max(2) - 1) as f64;
    let len = 0.8 * cell;
    let max_norm = field
        .vectors
        .row_iter()
        .map(|v| v[0].hypot(v[1]))
        .fold(0.0f64, f64::max);
    for (i, v) in field.vectors.row_iter().enumerate() {
        let (x, y) = field.node(i);
        let norm = v[0].hypot(v[1]);
        if norm == 0.0 || !norm.is_finite() {
            continue;
        }
        let (x0, y0) = (f.px(x), f.py(y));
        let (dx, dy) = (len * v[0] / norm, -len * v[1] / norm);
        let shade = (0.25 + 0.75 * (norm / max_norm).sqrt()).min(1.0);
        let _ = writeln!(
            s,
            r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{:.2}" y2="{:.2}" stroke="black" stroke-opacity="{shade:.3}" stroke-width="1"/>"#,
            x0 + dx,
            y0 + dy
        );
        let (hx, hy) = (x0 + dx, y0 + dy);
        let back = 0.3 * len;
        let (ux, uy) = (dx / len, dy / len);
        let _ = writeln!(
            s,
            r#"<polygon points="{hx:.2},{hy:.2} {:.2},{:.2} {:.2},{:.2}" fill="black" fill-opacity="{shade:.3}"/>"#,
            hx - back * ux - 0.5 * back * uy,
            hy - back * uy + 0.5 * back * ux,
            hx - back * ux + 0.5 * back * uy,
            hy - back * uy - 0.5 * back * ux
        );
    }
    s.push_str("</svg>\n");
    s
}

/// `L_g` as a line and `L_f` (when present) as a second line.
pub fn loss_curve(curve: &LossCurve, title: &str) -> String {
    let mut s = header(title);
    if curve.is_empty() {
        s.push_str("</svg>\n");
        return s;
    }
    let series_g: Vec<(f64, f64)> = curve.records.iter().map(|r| (r.step as f64, r.l_g)).collect();
    let series_f: Vec<(f64, f64)> = curve
        .records
        .iter()
        .filter_map(|r| r.l_f.map(|v| (r.step as f64, v)))
        .collect();
    let all = series_g.iter().chain(&series_f).map(|p| p.1).filter(|v| v.is_finite());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 1.0, lo + 1.0) };
    let f = Frame {
        x_min: 0.0,
        x_max: (curve.records.last().unwrap().step as f64).max(1.0),
        y_min: lo,
        y_max: hi,
    };
    axes(&mut s, &f);
    for (series, color, name) in [(&series_g, PALETTE[0], "L_g"), (&series_f, PALETTE[1], "L_f")] {
        if series.is_empty() {
            continue;
        }
        // Thin long curves to at most ~1000 vertices.
        let stride = series.len().div_ceil(1000);
        let mut d = String::new();
        for (k, (x, y)) in series.iter().step_by(stride).enumerate() {
            let _ = write!(d, "{}{:.2},{:.2} ", if k == 0 { "M" } else { "L" }, f.px(*x), f.py(*y));
        }
        let _ = writeln!(
            s,
            r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1"/>"#,
            d.trim_end()
        );
        let ly = if name == "L_g" { MARGIN + 14.0 } else { MARGIN + 28.0 };
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{ly:.1}" font-family="sans-serif" font-size="11" fill="{color}">{name}</text>"#,
            SIZE - MARGIN - 30.0
        );
    }
    s.push_str("</svg>\n");
    s
}
