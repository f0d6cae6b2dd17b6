//! Samples, face boxes, splits and the synthetic face generator.

mod boxes;
mod io;
mod split;
mod synth;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub use boxes::{load_sidecar, save_sidecar, BoxProvider};
pub use io::{load_manifest, save_manifest, ManifestEntry};
pub use split::{inject_label_noise, kfold_split, subsample_labels, LabelBudget};
pub use synth::{class_curvature, synth_generate, SynthSpec, FACE_RED_THRESHOLD};

/// Axis-aligned face box in pixel coordinates; `x1`, `y1` exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FaceBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl FaceBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::InvalidBox(format!(
                "({x0},{y0},{x1},{y1}) has no area"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            x0: 0,
            y0: 0,
            x1: width as u32,
            y1: height as u32,
        }
    }

    pub fn area(&self) -> u64 {
        u64::from(self.x1 - self.x0) * u64::from(self.y1 - self.y0)
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 as usize <= width && self.y1 as usize <= height
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSample {
    pub id: String,
    pub image: Image,
    pub label: Option<usize>,
    pub face_box: Option<FaceBox>,
    /// Eye and mouth pixels (`H·W`, row-major); only known for generated data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expression_mask: Option<Vec<bool>>,
}

impl ImageSample {
    pub fn unlabeled(&self) -> ImageSample {
        ImageSample {
            label: None,
            ..self.clone()
        }
    }

    pub fn validate(&self, class_count: usize) -> Result<()> {
        if !self.image.in_unit_range() {
            return Err(Error::Config(format!("sample {} has pixels outside [0,1]", self.id)));
        }
        if let Some(label) = self.label {
            if label >= class_count {
                return Err(Error::LabelOutOfRange {
                    id: self.id.clone(),
                    label,
                    classes: class_count,
                });
            }
        }
        if let Some(b) = self.face_box {
            if !b.fits(self.image.width, self.image.height) {
                return Err(Error::InvalidBox(format!("{b:?} outside image {}", self.id)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub labeled: Vec<ImageSample>,
    pub unlabeled: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
    pub class_count: usize,
}

impl DatasetSplit {
    pub fn with_test(mut self, test: Vec<ImageSample>) -> Self {
        self.test = test;
        self
    }

    /// Checks the disjointness and labeling invariants.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in self.labeled.iter().chain(&self.unlabeled).chain(&self.test) {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Config(format!("sample id {} appears twice in split", s.id)));
            }
        }
        if let Some(s) = self.labeled.iter().find(|s| s.label.is_none()) {
            return Err(Error::Config(format!("labeled sample {} has no label", s.id)));
        }
        if let Some(s) = self.unlabeled.iter().find(|s| s.label.is_some()) {
            return Err(Error::Config(format!("unlabeled sample {} carries a label", s.id)));
        }
        for s in self.labeled.iter().chain(&self.test) {
            s.validate(self.class_count)?;
        }
        Ok(())
    }
}

/// Per-class counts of labeled samples.
pub fn class_histogram(samples: &[ImageSample], class_count: usize) -> Vec<usize> {
    let mut h = vec![0; class_count];
    for s in samples {
        if let Some(l) = s.label {
            if l < class_count {
                h[l] += 1;
            }
        }
    }
    h
}
