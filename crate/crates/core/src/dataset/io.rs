//! Dataset manifests: a JSON array of `{id, path | inline, label?, box?}`.
//! Paths are relative to the manifest's directory and point at 8-bit PNGs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FaceBox, ImageSample};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inline: Option<Image>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    pub face_box: Option<FaceBox>,
}

pub fn load_manifest(path: &Path) -> Result<Vec<ImageSample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: format!("line {} column {}: {e}", e.line(), e.column()),
    })?;
    let root = path.parent().unwrap_or_else(|| Path::new("."));
    entries
        .into_iter()
        .map(|e| {
            let image = match (e.path, e.inline) {
                (Some(p), None) => Image::load_png(&root.join(p))?,
                (None, Some(img)) => {
                    Image::from_vec(img.height, img.width, img.channels, img.data)?
                }
                _ => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        message: format!("entry {} needs exactly one of `path` or `inline`", e.id),
                    })
                }
            };
            let s = ImageSample {
                id: e.id,
                image,
                label: e.label,
                face_box: e.face_box,
                expression_mask: None,
            };
            if let Some(b) = s.face_box {
                if !b.fits(s.image.width, s.image.height) {
                    return Err(Error::InvalidBox(format!("{b:?} outside image {}", s.id)));
                }
            }
            Ok(s)
        })
        .collect()
}

/// Writes each sample as `images/<id>.png` next to `manifest.json` in `dir`.
pub fn save_manifest(dir: &Path, samples: &[ImageSample]) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let rel = format!("images/{}.png", s.id);
        s.image.save_png(&dir.join(&rel))?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            path: Some(rel),
            inline: None,
            label: s.label,
            face_box: s.face_box,
        });
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&entries)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
