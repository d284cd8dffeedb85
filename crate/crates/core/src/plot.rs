//! Standalone SVG trend plots: log-scale error axis, one line per method,
//! ±1 standard deviation error bars.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::write_lines;
use crate::trend::TrendTable;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

struct Frame {
    x_lo: f64,
    x_hi: f64,
    y_lo: f64,
    y_hi: f64,
}

impl Frame {
    fn px(&self, v: f64) -> f64 {
        let w = WIDTH - LEFT - RIGHT;
        if self.x_hi == self.x_lo {
            LEFT + 0.5 * w
        } else {
            LEFT + w * (v - self.x_lo) / (self.x_hi - self.x_lo)
        }
    }

    fn py(&self, v: f64) -> f64 {
        let h = HEIGHT - TOP - BOTTOM;
        let l = v.max(10f64.powf(self.y_lo)).log10();
        TOP + h * (self.y_hi - l) / (self.y_hi - self.y_lo)
    }
}

/// Renders the table. Identical tables give identical bytes.
pub fn render_svg(table: &TrendTable, x_label: &str) -> Result<String> {
    if table.is_empty() {
        return Err(Error::invalid("cannot plot an empty trend table"));
    }
    let xs: Vec<f64> = table.rows.iter().map(|r| r.sweep_value as f64).collect();
    let positive: Vec<f64> = table
        .rows
        .iter()
        .flat_map(|r| [r.mean_rel_l2, r.mean_rel_l2 - r.std_rel_l2, r.mean_rel_l2 + r.std_rel_l2])
        .filter(|v| *v > 0.0)
        .collect();
    let (lo, hi) = if positive.is_empty() {
        (1e-3, 1.0)
    } else {
        (
            positive.iter().cloned().fold(f64::INFINITY, f64::min),
            positive.iter().cloned().fold(0.0, f64::max),
        )
    };
    let mut y_lo = lo.log10().floor();
    let mut y_hi = hi.log10().ceil();
    if y_hi <= y_lo {
        y_lo -= 1.0;
        y_hi += 1.0;
    }
    let frame = Frame {
        x_lo: xs.iter().cloned().fold(f64::INFINITY, f64::min),
        x_hi: xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        y_lo,
        y_hi,
    };

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM);
    writeln!(s, r#"<path d="M{x0:.2} {y0:.2} L{x0:.2} {y1:.2} L{x1:.2} {y1:.2}" fill="none" stroke="black"/>"#).unwrap();
    for d in (y_lo as i32)..=(y_hi as i32) {
        let y = frame.py(10f64.powi(d));
        writeln!(s, r#"<line x1="{:.2}" y1="{y:.2}" x2="{x0:.2}" y2="{y:.2}" stroke="black"/>"#, x0 - 5.0).unwrap();
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">1e{d}</text>"#, x0 - 8.0, y + 4.0).unwrap();
    }
    let mut ticks: Vec<usize> = table.rows.iter().map(|r| r.sweep_value).collect();
    ticks.sort_unstable();
    ticks.dedup();
    for t in ticks {
        let x = frame.px(t as f64);
        writeln!(s, r#"<line x1="{x:.2}" y1="{y1:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#, y1 + 5.0).unwrap();
        writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{t}</text>"#, y1 + 20.0).unwrap();
    }
    writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, 0.5 * (x0 + x1), HEIGHT - 15.0, escape(x_label)).unwrap();
    writeln!(
        s,
        r#"<text x="20" y="{:.2}" text-anchor="middle" transform="rotate(-90 20 {:.2})">relative L2 error</text>"#,
        0.5 * (y0 + y1),
        0.5 * (y0 + y1)
    )
    .unwrap();

    for (k, method) in table.methods().iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let rows = table.method_rows(method);
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (frame.px(r.sweep_value as f64), frame.py(r.mean_rel_l2))).collect();
        writeln!(s, r#"<g class="series" data-method="{}">"#, escape(method)).unwrap();
        for r in &rows {
            if r.std_rel_l2 > 0.0 {
                let x = frame.px(r.sweep_value as f64);
                let ya = frame.py(r.mean_rel_l2 - r.std_rel_l2);
                let yb = frame.py(r.mean_rel_l2 + r.std_rel_l2);
                writeln!(s, r#"<path class="errorbar" d="M{x:.2} {ya:.2} L{x:.2} {yb:.2} M{:.2} {ya:.2} L{:.2} {ya:.2} M{:.2} {yb:.2} L{:.2} {yb:.2}" stroke="{color}" fill="none"/>"#, x - 4.0, x + 4.0, x - 4.0, x + 4.0).unwrap();
            }
        }
        if pts.len() > 1 {
            let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
            writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, coords.join(" ")).unwrap();
        }
        for (x, y) in &pts {
            writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="{color}"/>"#).unwrap();
        }
        let ly = TOP + 10.0 + 20.0 * k as f64;
        let lx = WIDTH - RIGHT + 15.0;
        writeln!(s, r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0).unwrap();
        writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, lx + 26.0, ly + 4.0, escape(method)).unwrap();
        writeln!(s, "</g>").unwrap();
    }
    writeln!(s, "</svg>").unwrap();
    Ok(s)
}

pub fn emit_plot(table: &TrendTable, path: impl AsRef<Path>, x_label: &str) -> Result<()> {
    write_lines(path, &render_svg(table, x_label)?)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
