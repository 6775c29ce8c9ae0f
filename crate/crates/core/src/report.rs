//! Plain SVG plots and CSV helpers for run artifacts.

use std::fmt::Write as _;
use std::io::Write;

use crate::error::Result;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 50.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScatterPoint {
    pub x: f64,
    pub y: f64,
    pub class: usize,
}

#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn colour(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit<I: Iterator<Item = (f64, f64)>>(pts: I) -> Self {
        let mut f = Frame {
            x0: f64::INFINITY,
            x1: f64::NEG_INFINITY,
            y0: f64::INFINITY,
            y1: f64::NEG_INFINITY,
        };
        for (x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            f.x0 = f.x0.min(x);
            f.x1 = f.x1.max(x);
            f.y0 = f.y0.min(y);
            f.y1 = f.y1.max(y);
        }
        if !f.x0.is_finite() {
            return Frame { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 };
        }
        if f.x1 - f.x0 < 1e-12 {
            f.x0 -= 0.5;
            f.x1 += 0.5;
        }
        if f.y1 - f.y0 < 1e-12 {
            f.y0 -= 0.5;
            f.y1 += 0.5;
        }
        f
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn open(out: &mut String, title: &str, f: &Frame) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="25" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r##"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN
    );
    let _ = writeln!(
        out,
        r#"<text x="{MARGIN}" y="{}" font-family="sans-serif" font-size="11">{:.3}</text><text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="11">{:.3}</text>"#,
        HEIGHT - MARGIN + 15.0,
        f.x0,
        WIDTH - MARGIN,
        HEIGHT - MARGIN + 15.0,
        f.x1
    );
    let _ = writeln!(
        out,
        r#"<text x="5" y="{}" font-family="sans-serif" font-size="11">{:.3}</text><text x="5" y="{}" font-family="sans-serif" font-size="11">{:.3}</text>"#,
        HEIGHT - MARGIN,
        f.y0,
        MARGIN + 4.0,
        f.y1
    );
}

/// Scatter plot coloured by class.
pub fn svg_scatter(title: &str, points: &[ScatterPoint]) -> String {
    let f = Frame::fit(points.iter().map(|p| (p.x, p.y)));
    let mut out = String::new();
    open(&mut out, title, &f);
    for p in points.iter().filter(|p| p.x.is_finite() && p.y.is_finite()) {
        let _ = writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}" fill-opacity="0.7"/>"#,
            f.px(p.x),
            f.py(p.y),
            colour(p.class)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Line plot with one polyline per series and a legend. Non-finite points
/// break the line.
pub fn svg_lines(title: &str, series: &[Series]) -> String {
    let f = Frame::fit(series.iter().flat_map(|s| s.points.iter().copied()));
    let mut out = String::new();
    open(&mut out, title, &f);
    for (k, s) in series.iter().enumerate() {
        let mut segment: Vec<String> = Vec::new();
        let flush = |seg: &mut Vec<String>, out: &mut String| {
            if !seg.is_empty() {
                let _ = writeln!(
                    out,
                    r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
                    colour(k),
                    seg.join(" ")
                );
                seg.clear();
            }
        };
        for &(x, y) in &s.points {
            if x.is_finite() && y.is_finite() {
                segment.push(format!("{:.2},{:.2}", f.px(x), f.py(y)));
            } else {
                flush(&mut segment, &mut out);
            }
        }
        flush(&mut segment, &mut out);
        let ly = MARGIN + 15.0 + 15.0 * k as f64;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{ly}" font-family="sans-serif" font-size="11" fill="{}">{}</text>"#,
            MARGIN + 8.0,
            colour(k),
            escape(&s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Writes a header and rows as RFC-4180 CSV.
pub fn write_table<W: Write, S: AsRef<str>>(w: W, header: &[&str], rows: &[Vec<S>]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(header)?;
    for r in rows {
        wr.write_record(r.iter().map(|s| s.as_ref()))?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads a CSV with a header into (header, rows).
pub fn read_table<R: std::io::Read>(r: R) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers()?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in rd.records() {
        rows.push(rec?.iter().map(String::from).collect());
    }
    Ok((header, rows))
}
