//! CSV, JSON and PNG report writers.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::Image;

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Shortest representation that parses back to the same `f64`.
pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.into(),
            message: format!("{other:?}"),
        },
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

const PALETTE: [[f64; 3]; 6] = [
    [0.12, 0.47, 0.71],
    [1.0, 0.5, 0.05],
    [0.17, 0.63, 0.17],
    [0.84, 0.15, 0.16],
    [0.58, 0.4, 0.74],
    [0.55, 0.34, 0.29],
];

fn put(img: &mut Image, x: i64, y: i64, rgb: [f64; 3]) {
    if x >= 0 && y >= 0 && (x as usize) < img.width && (y as usize) < img.height {
        for (c, v) in rgb.iter().enumerate() {
            img.set(y as usize, x as usize, c, *v);
        }
    }
}

fn line(img: &mut Image, (x0, y0): (i64, i64), (x1, y1): (i64, i64), rgb: [f64; 3]) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for s in 0..=steps {
        let x = x0 + (x1 - x0) * s / steps;
        let y = y0 + (y1 - y0) * s / steps;
        put(img, x, y, rgb);
        put(img, x, y + 1, rgb);
    }
}

/// Line chart of each series on shared axes; series colors follow
/// insertion order.
pub fn plot_lines(path: &Path, series: &[Vec<(f64, f64)>]) -> Result<()> {
    let (w, h, m) = (480usize, 320usize, 24i64);
    let mut img = Image::filled(h, w, 3, 1.0);
    let pts = series.iter().flatten();
    let (mut xlo, mut xhi, mut ylo, mut yhi) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts.filter(|p| p.0.is_finite() && p.1.is_finite()) {
        xlo = xlo.min(x);
        xhi = xhi.max(x);
        ylo = ylo.min(y);
        yhi = yhi.max(y);
    }
    if !xlo.is_finite() {
        (xlo, xhi, ylo, yhi) = (0.0, 1.0, 0.0, 1.0);
    }
    if xhi - xlo < 1e-12 {
        xhi = xlo + 1.0;
    }
    if yhi - ylo < 1e-12 {
        yhi = ylo + 1.0;
    }
    let (pw, ph) = (w as i64 - 2 * m, h as i64 - 2 * m);
    let to_px = |x: f64, y: f64| {
        (
            m + ((x - xlo) / (xhi - xlo) * pw as f64).round() as i64,
            m + ph - ((y - ylo) / (yhi - ylo) * ph as f64).round() as i64,
        )
    };
    let axis = [0.2, 0.2, 0.2];
    line(&mut img, (m, m + ph), (m + pw, m + ph), axis);
    line(&mut img, (m, m), (m, m + ph), axis);
    for (k, s) in series.iter().enumerate() {
        let rgb = PALETTE[k % PALETTE.len()];
        let finite: Vec<_> = s.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
        for pair in finite.windows(2) {
            line(&mut img, to_px(pair[0].0, pair[0].1), to_px(pair[1].0, pair[1].1), rgb);
        }
        for p in &finite {
            let (x, y) = to_px(p.0, p.1);
            for d in -2..=2 {
                put(&mut img, x + d, y, rgb);
                put(&mut img, x, y + d, rgb);
            }
        }
    }
    ensure_parent(path)?;
    img.save_png(path)
}

/// Row-normalized heatmap, one square cell per entry.
pub fn heatmap(path: &Path, rows: &[Vec<f64>], cell: usize) -> Result<()> {
    let n = rows.len();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    if n == 0 || cols == 0 {
        return Err(Error::Empty("heatmap has no cells".into()));
    }
    let mut img = Image::filled(n * cell, cols * cell, 3, 1.0);
    for (r, row) in rows.iter().enumerate() {
        let total: f64 = row.iter().sum();
        for (c, &v) in row.iter().enumerate() {
            let t = if total > 0.0 { v / total } else { 0.0 };
            let rgb = [1.0 - 0.9 * t, 1.0 - 0.6 * t, 1.0 - 0.2 * t];
            for y in 0..cell {
                for x in 0..cell {
                    put(&mut img, (c * cell + x) as i64, (r * cell + y) as i64, rgb);
                }
            }
        }
    }
    ensure_parent(path)?;
    img.save_png(path)
}

/// Tiles equally sized images into a grid with a one-pixel gutter,
/// upscaled by `scale`. Grayscale tiles are replicated to RGB.
pub fn image_grid(path: &Path, rows: &[Vec<Image>], scale: usize) -> Result<()> {
    let first = rows
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::Empty("image grid has no tiles".into()))?;
    let (th, tw) = (first.height * scale, first.width * scale);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut img = Image::filled(rows.len() * (th + 1) + 1, cols * (tw + 1) + 1, 3, 1.0);
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            if tile.height * scale != th || tile.width * scale != tw {
                return Err(Error::Shape("image grid tiles differ in size".into()));
            }
            for y in 0..th {
                for x in 0..tw {
                    for ch in 0..3 {
                        let v = tile.get(y / scale, x / scale, ch.min(tile.channels - 1));
                        img.set(1 + r * (th + 1) + y, 1 + c * (tw + 1) + x, ch, v.clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
    ensure_parent(path)?;
    img.save_png(path)
}
