//! Face-box providers. Detection itself is outside this crate: boxes come
//! from the sample, from the full frame, or from a sidecar file.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{FaceBox, ImageSample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub enum BoxProvider {
    /// The box stored on the sample (generator ground truth).
    #[default]
    Stored,
    /// The whole frame; the fallback when no detector is available.
    FullImage,
    /// Boxes keyed by sample id, loaded from a sidecar file.
    Sidecar(HashMap<String, FaceBox>),
}

impl BoxProvider {
    pub fn face_box(&self, sample: &ImageSample) -> Result<FaceBox> {
        let full = FaceBox::full(sample.image.width, sample.image.height);
        match self {
            BoxProvider::Stored => sample
                .face_box
                .ok_or_else(|| Error::MissingBox(sample.id.clone())),
            BoxProvider::FullImage => Ok(full),
            BoxProvider::Sidecar(map) => match map.get(&sample.id) {
                Some(b) => Ok(*b),
                None => {
                    log::warn!("no sidecar box for {}; using full image", sample.id);
                    Ok(full)
                }
            },
        }
    }

    pub fn from_sidecar(path: &Path) -> Result<Self> {
        Ok(BoxProvider::Sidecar(load_sidecar(path)?))
    }
}

/// Reads `id x0 y0 x1 y1` records, one per line. Blank lines and lines
/// starting with `#` are skipped.
pub fn load_sidecar(path: &Path) -> Result<HashMap<String, FaceBox>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: {msg}", lineno + 1),
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", fields.len())));
        }
        let mut c = [0u32; 4];
        for (slot, f) in c.iter_mut().zip(&fields[1..]) {
            *slot = f
                .parse()
                .map_err(|_| bad(format!("`{f}` is not a non-negative integer")))?;
        }
        let b = FaceBox::new(c[0], c[1], c[2], c[3]).map_err(|e| bad(e.to_string()))?;
        map.insert(fields[0].to_string(), b);
    }
    Ok(map)
}

/// Writes records sorted by id.
pub fn save_sidecar(path: &Path, boxes: &HashMap<String, FaceBox>) -> Result<()> {
    let mut ids: Vec<&String> = boxes.keys().collect();
    ids.sort();
    let mut out = String::new();
    for id in ids {
        let b = boxes[id];
        writeln!(out, "{id} {} {} {} {}", b.x0, b.y0, b.x1, b.y1).expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
