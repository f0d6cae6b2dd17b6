//! Parametric face-like images with exactly known face boxes.
//!
//! Each sample is an ellipse "face" on a darker background with two eye
//! dots and a mouth arc. The mouth curvature encodes the class: class 0 is
//! fully downturned, the last class fully upturned, classes in between are
//! spaced evenly (so for three classes: down, flat, up). Pose jitter moves,
//! scales and yaws the face so face boxes differ between samples.
//!
//! The red channel separates face from background for every generated
//! pixel: skin stays above 0.6 and background below 0.4 after noise.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{FaceBox, ImageSample};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

/// Red-channel threshold separating skin from background.
pub const FACE_RED_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_samples: usize,
    #[serde(default = "default_classes")]
    pub class_count: usize,
    #[serde(default = "default_size")]
    pub image_size: usize,
    #[serde(default)]
    pub jitter: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_classes() -> usize {
    3
}

fn default_size() -> usize {
    32
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            class_count: 3,
            image_size: 32,
            jitter: 0.3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::Config(format!(
                "synth class_count must be >= 2, got {}",
                self.class_count
            )));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!(
                "synth image_size must be >= 16, got {}",
                self.image_size
            )));
        }
        if !(0.0..=1.0).contains(&self.jitter) {
            return Err(Error::Config(format!("synth jitter {} outside [0,1]", self.jitter)));
        }
        Ok(())
    }

    pub fn validate_for_patch(&self, patch_size: usize) -> Result<()> {
        self.validate()?;
        if patch_size == 0 || self.image_size % patch_size != 0 {
            return Err(Error::Config(format!(
                "synth image_size {} not divisible by patch size {patch_size}",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// Mouth curvature in `[-1, 1]` for a class.
pub fn class_curvature(class: usize, class_count: usize) -> f64 {
    2.0 * class as f64 / (class_count - 1) as f64 - 1.0
}

struct Face {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
}

impl Face {
    #[inline]
    fn contains(&self, x: usize, y: usize) -> bool {
        let dx = (x as f64 + 0.5 - self.cx) / self.a;
        let dy = (y as f64 + 0.5 - self.cy) / self.b;
        dx * dx + dy * dy <= 1.0
    }

    /// Tight pixel bounds of `contains`, from the row/column nearest the
    /// center (where the ellipse is widest/tallest).
    fn bounds(&self, size: usize) -> FaceBox {
        let (x0, x1) = extent(self.cx, self.a, self.cy, self.b, size, |x, y| self.contains(x, y));
        let (y0, y1) = extent(self.cy, self.b, self.cx, self.a, size, |y, x| self.contains(x, y));
        FaceBox {
            x0: x0 as u32,
            y0: y0 as u32,
            x1: x1 as u32,
            y1: y1 as u32,
        }
    }
}

/// Extent along one axis: half-width at the perpendicular line closest to
/// the center, then snapped to the inclusion predicate at both ends.
fn extent(
    c: f64,
    half: f64,
    c_perp: f64,
    half_perp: f64,
    size: usize,
    inside: impl Fn(usize, usize) -> bool,
) -> (usize, usize) {
    let line = ((c_perp - 0.5).round().max(0.0) as usize).min(size - 1);
    let d = (line as f64 + 0.5 - c_perp) / half_perp;
    let w = half * (1.0 - d * d).max(0.0).sqrt();
    let mut lo = ((c - w - 0.5).ceil().max(0.0) as usize).min(size - 1);
    let mut hi = ((c + w - 0.5).floor().max(0.0) as usize).min(size - 1);
    while lo > 0 && inside(lo - 1, line) {
        lo -= 1;
    }
    while !inside(lo, line) && lo < hi {
        lo += 1;
    }
    while hi + 1 < size && inside(hi + 1, line) {
        hi += 1;
    }
    while !inside(hi, line) && hi > lo {
        hi -= 1;
    }
    (lo, hi + 1)
}

fn render(index: usize, spec: &SynthSpec) -> ImageSample {
    let mut r = rng::rng(rng::derive_n(rng::derive(spec.seed, "synth"), index as u64));
    let s = spec.image_size as f64;
    let n = spec.image_size;
    let j = spec.jitter;
    let label = index % spec.class_count;

    // pose
    let yaw = j * r.random_range(-1.0..=1.0);
    let scale = 1.0 + 0.3 * j * r.random_range(-1.0..=1.0);
    let a = 0.28 * s * scale * (1.0 - 0.3 * yaw.abs());
    let b = 0.36 * s * scale;
    let tx = 0.3 * j * s * r.random_range(-1.0..=1.0);
    let ty = 0.3 * j * s * r.random_range(-1.0..=1.0);
    let cx = (s / 2.0 + tx).clamp(a + 1.0, s - a - 1.0);
    let cy = (s / 2.0 + ty).clamp(b + 1.0, s - b - 1.0);
    let face = Face { cx, cy, a, b };

    // appearance
    let bg = [
        r.random_range(0.05..0.3),
        r.random_range(0.2..0.5),
        r.random_range(0.4..0.8),
    ];
    let skin = [
        r.random_range(0.72..0.95),
        r.random_range(0.5..0.75),
        r.random_range(0.35..0.6),
    ];
    let intensity = r.random_range(0.3..1.0);
    let curv = class_curvature(label, spec.class_count) * intensity;
    let shift = 0.3 * a * yaw;
    let eye_r = (0.12 * a).max(1.0);
    let eyes = [
        (cx + shift - 0.4 * a, cy - 0.25 * b),
        (cx + shift + 0.4 * a, cy - 0.25 * b),
    ];
    let (mx, my, mw, amp) = (cx + shift, cy + 0.4 * b, 0.5 * a, 0.45 * b);
    let mouth: Vec<(f64, f64)> = (0..=48)
        .map(|k| {
            let u = k as f64 / 24.0 - 1.0;
            (mx + u * mw, my + amp * curv * (0.5 - u * u))
        })
        .collect();
    let mouth_half = 0.9;

    let mut img = Image::new(n, n, 3);
    let mut expr = vec![false; n * n];
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut col = if face.contains(x, y) {
                let dx = (px - cx) / a;
                let dy = (py - cy) / b;
                let shade = 0.05 * (dx * dx + dy * dy);
                let eye = eyes
                    .iter()
                    .any(|&(ex, ey)| (px - ex).powi(2) + (py - ey).powi(2) <= eye_r * eye_r);
                let on_mouth = mouth
                    .iter()
                    .any(|&(qx, qy)| (px - qx).powi(2) + (py - qy).powi(2) <= mouth_half * mouth_half);
                if eye {
                    expr[y * n + x] = true;
                    [0.1, 0.08, 0.08]
                } else if on_mouth {
                    expr[y * n + x] = true;
                    [0.45, 0.1, 0.12]
                } else {
                    [skin[0] - shade, skin[1] - shade, skin[2] - shade]
                }
            } else {
                let g = 0.05 * (py / s - 0.5);
                [bg[0] + g, bg[1] + g, bg[2] + g]
            };
            for c in col.iter_mut() {
                *c = (*c + r.random_range(-0.05..=0.05)).clamp(0.0, 1.0);
            }
            for (c, v) in col.iter().enumerate() {
                img.set(y, x, c, *v);
            }
        }
    }

    ImageSample {
        id: format!("synth{:x}_{index:06}", spec.seed),
        image: img,
        label: Some(label),
        face_box: Some(face.bounds(n)),
        expression_mask: Some(expr),
    }
}

/// Generates `spec.n_samples` labeled faces; deterministic in `spec.seed`.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<ImageSample>> {
    spec.validate()?;
    Ok((0..spec.n_samples).map(|i| render(i, spec)).collect())
}
