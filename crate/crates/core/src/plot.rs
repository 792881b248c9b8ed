//! Static SVG figures: reconstruction bands and coefficient densities.

use std::fmt::Write as _;

use crate::inla::ReconstructionRow;
use crate::timeseries::TimeSeries;

const WIDTH: f64 = 900.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    left: f64,
    top: f64,
    w: f64,
    h: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        self.left + (x - self.x0) / (self.x1 - self.x0).max(f64::MIN_POSITIVE) * self.w
    }

    fn py(&self, y: f64) -> f64 {
        self.top + self.h - (y - self.y0) / (self.y1 - self.y0).max(f64::MIN_POSITIVE) * self.h
    }

    fn path(&self, pts: impl Iterator<Item = (f64, f64)>) -> String {
        let mut s = String::new();
        for (i, (x, y)) in pts.enumerate() {
            let _ = write!(s, "{}{:.2},{:.2}", if i == 0 { "M" } else { " L" }, self.px(x), self.py(y));
        }
        s
    }

    fn axes(&self, svg: &mut String, xlabel: &str) {
        let _ = write!(
            svg,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#444"/>"##,
            self.left, self.top, self.w, self.h
        );
        for (v, anchor_x) in [(self.x0, self.left), (self.x1, self.left + self.w)] {
            let _ = write!(
                svg,
                r#"<text x="{anchor_x:.2}" y="{:.2}" font-size="11" text-anchor="middle">{}</text>"#,
                self.top + self.h + 14.0,
                short(v)
            );
        }
        for (v, y) in [(self.y0, self.top + self.h), (self.y1, self.top)] {
            let _ = write!(
                svg,
                r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{}</text>"#,
                self.left - 4.0,
                y + 4.0,
                short(v)
            );
        }
        let _ = write!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{}</text>"#,
            self.left + self.w / 2.0,
            self.top + self.h + 28.0,
            escape(xlabel)
        );
    }
}

fn short(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}

fn header(w: f64, h: f64) -> String {
    format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif">"#)
}

/// Posterior mean with its 95% band, optionally over a reference series.
pub fn reconstruction_svg(title: &str, rows: &[ReconstructionRow], reference: Option<&TimeSeries>) -> String {
    let mut svg = header(WIDTH, HEIGHT);
    if rows.is_empty() {
        svg.push_str("</svg>\n");
        return svg;
    }
    let (x0, x1) = (f64::from(rows[0].year), f64::from(rows[rows.len() - 1].year));
    let refs: Vec<(f64, f64)> = reference
        .map(|r| r.observed().map(|(y, v)| (f64::from(y), v)).filter(|(y, _)| *y >= x0 && *y <= x1).collect())
        .unwrap_or_default();
    let (y0, y1) = bounds(rows.iter().flat_map(|r| [r.q025, r.q975]).chain(refs.iter().map(|p| p.1)));
    let f = Frame {
        x0,
        x1,
        y0,
        y1,
        left: MARGIN,
        top: 30.0,
        w: WIDTH - 2.0 * MARGIN,
        h: HEIGHT - 80.0,
    };
    let _ = write!(
        svg,
        r#"<text x="{:.1}" y="18" font-size="14" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let upper = f.path(rows.iter().map(|r| (f64::from(r.year), r.q975)));
    let lower: Vec<String> = rows
        .iter()
        .rev()
        .map(|r| format!("{:.2},{:.2}", f.px(f64::from(r.year)), f.py(r.q025)))
        .collect();
    let _ = write!(
        svg,
        r##"<path d="{upper} L{} Z" fill="#1f77b4" fill-opacity="0.25" stroke="none"/>"##,
        lower.join(" L")
    );
    if !refs.is_empty() {
        let _ = write!(
            svg,
            r##"<path d="{}" fill="none" stroke="#000" stroke-width="0.8"/>"##,
            f.path(refs.iter().copied())
        );
    }
    let _ = write!(
        svg,
        r##"<path d="{}" fill="none" stroke="#1f77b4" stroke-width="1"/>"##,
        f.path(rows.iter().map(|r| (f64::from(r.year), r.mean)))
    );
    f.axes(&mut svg, "year");
    svg.push_str("</svg>\n");
    svg
}

/// One density curve of a panel.
pub struct Curve<'a> {
    pub label: &'a str,
    pub points: &'a [(f64, f64)],
}

/// A row of density panels, one per parameter, each with one curve per label.
pub fn density_svg(panels: &[(&str, Vec<Curve<'_>>)]) -> String {
    let cols = panels.len().max(1) as f64;
    let pw = 260.0;
    let ph = 220.0;
    let w = cols * pw;
    let h = ph + 30.0;
    let mut svg = header(w, h);
    for (i, (name, curves)) in panels.iter().enumerate() {
        let (x0, x1) = bounds(curves.iter().flat_map(|c| c.points.iter().map(|p| p.0)));
        let (_, y1) = bounds(curves.iter().flat_map(|c| c.points.iter().map(|p| p.1)));
        let f = Frame {
            x0,
            x1,
            y0: 0.0,
            y1,
            left: i as f64 * pw + 45.0,
            top: 20.0,
            w: pw - 60.0,
            h: ph - 60.0,
        };
        for (j, c) in curves.iter().enumerate() {
            let color = COLORS[j % COLORS.len()];
            let _ = write!(
                svg,
                r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.2"/>"#,
                f.path(c.points.iter().copied())
            );
            let _ = write!(
                svg,
                r#"<text x="{:.2}" y="{:.2}" font-size="10" fill="{color}">{}</text>"#,
                f.left + 4.0,
                f.top + 12.0 + 12.0 * j as f64,
                escape(c.label)
            );
        }
        f.axes(&mut svg, name);
    }
    svg.push_str("</svg>\n");
    svg
}
