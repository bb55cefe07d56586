//! Deterministic report emission: atomic file writes, CSV tables, minimal
//! SVG charts, and binary PGM image grids. No plotting dependencies; every
//! byte of output is a pure function of the data.

use crate::error::{Error, Result};
use std::path::Path;

/// Write a file atomically: write to a sibling temp file, then rename over
/// the destination.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(d) = dir {
        std::fs::create_dir_all(d).map_err(Error::io(d.display().to_string()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp_path = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp_path, bytes).map_err(Error::io(tmp_path.display().to_string()))?;
    std::fs::rename(&tmp_path, path).map_err(Error::io(path.display().to_string()))
}

/// Shortest round-trip decimal rendering of an `f64` (Rust's default float
/// formatting), used for all CSV numbers so reruns are byte-identical.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// A CSV table with a fixed header row.
pub struct Csv {
    out: String,
    columns: usize,
}

impl Csv {
    pub fn new(header: &[&str]) -> Csv {
        Csv { out: format!("{}\n", header.join(",")), columns: header.len() }
    }

    pub fn row(&mut self, cells: &[String]) -> &mut Self {
        assert_eq!(cells.len(), self.columns, "CSV row width");
        self.out.push_str(&cells.join(","));
        self.out.push('\n');
        self
    }

    pub fn row_f64(&mut self, cells: &[f64]) -> &mut Self {
        let cells: Vec<String> = cells.iter().map(|&v| fmt_f64(v)).collect();
        self.row(&cells)
    }

    pub fn to_string(&self) -> String {
        self.out.clone()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.out.as_bytes())
    }
}

// ---------------------------------------------------------------------------
// SVG
// ---------------------------------------------------------------------------

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 480.0;
const MARGIN: f64 = 54.0;
const PALETTE: [&str; 6] = ["#1f6fb2", "#d1495b", "#3a7d44", "#8e5fa2", "#c97b1c", "#4f5d75"];

fn axis_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        MARGIN + (v - self.x0) / (self.x1 - self.x0) * (SVG_W - 2.0 * MARGIN)
    }

    fn y(&self, v: f64) -> f64 {
        SVG_H - MARGIN - (v - self.y0) / (self.y1 - self.y0) * (SVG_H - 2.0 * MARGIN)
    }
}

fn svg_head(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" \
         viewBox=\"0 0 {SVG_W} {SVG_H}\" font-family=\"monospace\" font-size=\"12\">\n\
         <rect width=\"{SVG_W}\" height=\"{SVG_H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        SVG_W / 2.0,
        xml_escape(title)
    )
}

fn svg_axes(f: &Frame, xlabel: &str, ylabel: &str) -> String {
    let mut s = format!(
        "<rect x=\"{m}\" y=\"{m}\" width=\"{w}\" height=\"{h}\" fill=\"none\" stroke=\"#333\"/>\n",
        m = MARGIN,
        w = SVG_W - 2.0 * MARGIN,
        h = SVG_H - 2.0 * MARGIN
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = f.x0 + t * (f.x1 - f.x0);
        let yv = f.y0 + t * (f.y1 - f.y0);
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{:.3}</text>\n",
            f.x(xv),
            SVG_H - MARGIN + 18.0,
            xv
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{:.3}</text>\n",
            MARGIN - 6.0,
            f.y(yv) + 4.0,
            yv
        ));
    }
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
        SVG_W / 2.0,
        SVG_H - 12.0,
        xml_escape(xlabel)
    ));
    s.push_str(&format!(
        "<text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">{}</text>\n",
        SVG_H / 2.0,
        SVG_H / 2.0,
        xml_escape(ylabel)
    ));
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A line chart over named `(x, y)` series.
pub fn svg_line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (x0, x1) = axis_range(series.iter().flat_map(|(_, p)| p.iter().map(|&(x, _)| x)));
    let (y0, y1) = axis_range(series.iter().flat_map(|(_, p)| p.iter().map(|&(_, y)| y)));
    let f = Frame { x0, x1, y0, y1 };
    let mut s = svg_head(title);
    s.push_str(&svg_axes(&f, xlabel, ylabel));
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", f.x(x), f.y(y))).collect();
        s.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>\n",
            path.join(" "),
            color
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{}\">{}</text>\n",
            SVG_W - MARGIN - 150.0,
            MARGIN + 16.0 + 16.0 * i as f64,
            color,
            xml_escape(label)
        ));
    }
    s.push_str("</svg>\n");
    s
}

/// A scatter plot over named point groups.
pub fn svg_scatter(title: &str, xlabel: &str, ylabel: &str, groups: &[(String, Vec<(f64, f64)>)]) -> String {
    let (x0, x1) = axis_range(groups.iter().flat_map(|(_, p)| p.iter().map(|&(x, _)| x)));
    let (y0, y1) = axis_range(groups.iter().flat_map(|(_, p)| p.iter().map(|&(_, y)| y)));
    let f = Frame { x0, x1, y0, y1 };
    let mut s = svg_head(title);
    s.push_str(&svg_axes(&f, xlabel, ylabel));
    for (i, (label, pts)) in groups.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for &(x, y) in pts {
            s.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.2\" fill=\"{}\" fill-opacity=\"0.7\"/>\n",
                f.x(x),
                f.y(y),
                color
            ));
        }
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{}\">{}</text>\n",
            SVG_W - MARGIN - 150.0,
            MARGIN + 16.0 + 16.0 * i as f64,
            color,
            xml_escape(label)
        ));
    }
    s.push_str("</svg>\n");
    s
}

/// Binary (P5) PGM image.
pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "PGM pixel count");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    write_atomic(path, &pgm_bytes(width, height, pixels))
}
