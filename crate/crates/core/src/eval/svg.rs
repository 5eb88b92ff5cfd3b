//! Minimal standalone SVG output for curves and heatmaps.

use std::fmt::Write;
use std::path::Path;

use crate::error::{Error, Result};

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;

fn scale(v: f64, lo: f64, hi: f64, a: f64, b: f64) -> f64 {
    if hi == lo {
        return (a + b) / 2.0;
    }
    a + (v - lo) / (hi - lo) * (b - a)
}

/// A single polyline with point markers.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().copied().unzip();
    let bounds = |v: &[f64]| {
        (
            v.iter().copied().fold(f64::INFINITY, f64::min),
            v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    };
    let (x0, x1) = bounds(&xs);
    let (y0, y1) = bounds(&ys);
    let mut s = header(title);
    let _ = write!(
        s,
        r#"<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    let coords: Vec<String> = points
        .iter()
        .map(|&(x, y)| {
            format!(
                "{:.1},{:.1}",
                scale(x, x0, x1, PAD, W - PAD),
                scale(y, y0, y1, H - PAD, PAD)
            )
        })
        .collect();
    let _ = write!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, coords.join(" "));
    for c in &coords {
        let (cx, cy) = c.split_once(',').unwrap();
        let _ = write!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="steelblue"/>"#);
    }
    let _ = write!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text><text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 12.0,
        escape(x_label),
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    let _ = write!(s, r#"<text x="{PAD}" y="{}" font-size="10">{x0:.2}..{x1:.2} / {y0:.2}..{y1:.2}</text>"#, H - PAD + 14.0);
    s.push_str("</svg>\n");
    s
}

/// Grid of values in `[lo, hi]` shaded from white to dark blue.
pub fn heatmap(title: &str, rows: &[String], values: &[Vec<f64>], lo: f64, hi: f64) -> String {
    let cols = values.first().map_or(0, Vec::len).max(1);
    let cw = (W - 2.0 * PAD) / cols as f64;
    let ch = (H - 2.0 * PAD) / rows.len().max(1) as f64;
    let mut s = header(title);
    for (r, (name, row)) in rows.iter().zip(values).enumerate() {
        let y = PAD + r as f64 * ch;
        let _ = write!(s, r#"<text x="{}" y="{:.1}" text-anchor="end" font-size="11">{}</text>"#, PAD - 4.0, y + ch / 2.0 + 4.0, escape(name));
        for (c, &v) in row.iter().enumerate() {
            let t = scale(v.clamp(lo, hi), lo, hi, 0.0, 1.0);
            let shade = |full: f64, dark: f64| (full + (dark - full) * t).round() as u8;
            let _ = write!(
                s,
                r#"<rect x="{:.1}" y="{y:.1}" width="{cw:.1}" height="{ch:.1}" fill="rgb({},{},{})"><title>{v:.3}</title></rect>"#,
                PAD + c as f64 * cw,
                shade(255.0, 8.0),
                shade(255.0, 48.0),
                shade(255.0, 107.0)
            );
        }
    }
    for c in 0..cols {
        let _ = write!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle" font-size="11">{}</text>"#, PAD + (c as f64 + 0.5) * cw, H - PAD + 14.0, c + 1);
    }
    s.push_str("</svg>\n");
    s
}

fn header(title: &str) -> String {
    format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif"><rect width="100%" height="100%" fill="white"/><text x="{}" y="24" text-anchor="middle">{}</text>"#,
        W / 2.0,
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn write_svg(path: &Path, svg: &str) -> Result<()> {
    super::ensure_parent(path)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}
