use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

/// Fill value for pixels exposed by geometric ops.
const FILL: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Weak,
    Strong,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    pub kind: AugmentKind,
    /// Area fraction range of the random resized crop.
    pub crop_scale_range: (f64, f64),
    #[serde(default = "half")]
    pub flip_prob: f64,
    /// Ops applied per image (strong only).
    #[serde(default)]
    pub randaugment_ops: usize,
    /// 0..=10
    #[serde(default)]
    pub randaugment_magnitude: u32,
}

fn half() -> f64 {
    0.5
}

impl AugmentPolicy {
    pub fn weak() -> Self {
        Self {
            kind: AugmentKind::Weak,
            crop_scale_range: (0.8, 1.0),
            flip_prob: 0.5,
            randaugment_ops: 0,
            randaugment_magnitude: 0,
        }
    }

    pub fn strong() -> Self {
        Self {
            kind: AugmentKind::Strong,
            crop_scale_range: (0.8, 1.0),
            flip_prob: 0.5,
            randaugment_ops: 2,
            randaugment_magnitude: 9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale_range;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop scale range ({lo}, {hi}) invalid")));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob {} outside [0,1]", self.flip_prob)));
        }
        if self.kind == AugmentKind::Weak && self.randaugment_ops > 0 {
            return Err(Error::Config("weak policy cannot include RandAugment ops".into()));
        }
        if self.randaugment_magnitude > 10 {
            return Err(Error::Config(format!(
                "RandAugment magnitude {} above 10",
                self.randaugment_magnitude
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RandOp {
    Rotate,
    TranslateX,
    TranslateY,
    ShearX,
    ShearY,
    Brightness,
    Contrast,
    InvertLite,
    Posterize,
}

pub const RAND_OPS: [RandOp; 9] = [
    RandOp::Rotate,
    RandOp::TranslateX,
    RandOp::TranslateY,
    RandOp::ShearX,
    RandOp::ShearY,
    RandOp::Brightness,
    RandOp::Contrast,
    RandOp::InvertLite,
    RandOp::Posterize,
];

/// Resamples `img` through the inverse map `src(y, x)` with bilinear
/// interpolation.
fn remap(img: &Image, src: impl Fn(f64, f64) -> (f64, f64), fill: f64) -> Image {
    let mut out = Image::new(img.height, img.width, img.channels);
    for y in 0..img.height {
        for x in 0..img.width {
            let (sy, sx) = src(y as f64, x as f64);
            for c in 0..img.channels {
                out.set(y, x, c, img.sample_bilinear(sy, sx, c, fill));
            }
        }
    }
    out
}

fn random_resized_crop(img: &Image, (lo, hi): (f64, f64), r: &mut rng::Rng) -> Image {
    let (h, w) = (img.height as f64, img.width as f64);
    let (log_lo, log_hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..10 {
        let scale = if lo == hi { lo } else { r.random_range(lo..=hi) };
        let ratio = r.random_range(log_lo..log_hi).exp();
        let cw = (scale * h * w * ratio).sqrt();
        let ch = (scale * h * w / ratio).sqrt();
        if cw <= w && ch <= h {
            let x0 = r.random_range(0.0..=w - cw);
            let y0 = r.random_range(0.0..=h - ch);
            return remap(
                img,
                |y, x| (y0 + (y + 0.5) * ch / h - 0.5, x0 + (x + 0.5) * cw / w - 0.5),
                FILL,
            );
        }
    }
    img.clone()
}

fn hflip(img: &Image) -> Image {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                out.set(y, x, c, img.get(y, img.width - 1 - x, c));
            }
        }
    }
    out
}

/// Inverse affine about the image center: output (y, x) samples
/// `center + m · (p - center)` in the source.
fn affine(img: &Image, m: [[f64; 2]; 2], shift: (f64, f64)) -> Image {
    let cy = (img.height as f64 - 1.0) / 2.0;
    let cx = (img.width as f64 - 1.0) / 2.0;
    remap(
        img,
        |y, x| {
            let (dy, dx) = (y - cy, x - cx);
            (
                cy + m[0][0] * dy + m[0][1] * dx - shift.0,
                cx + m[1][0] * dy + m[1][1] * dx - shift.1,
            )
        },
        FILL,
    )
}

fn apply_op(img: &Image, op: RandOp, magnitude: f64, r: &mut rng::Rng) -> Image {
    let sign = if r.random_bool(0.5) { 1.0 } else { -1.0 };
    let m = magnitude;
    let size = img.height.max(img.width) as f64;
    match op {
        RandOp::Rotate => {
            let t = sign * m * 30f64.to_radians();
            affine(img, [[t.cos(), t.sin()], [-t.sin(), t.cos()]], (0.0, 0.0))
        }
        RandOp::TranslateX => affine(img, [[1.0, 0.0], [0.0, 1.0]], (0.0, sign * m * 0.3 * size)),
        RandOp::TranslateY => affine(img, [[1.0, 0.0], [0.0, 1.0]], (sign * m * 0.3 * size, 0.0)),
        RandOp::ShearX => affine(img, [[1.0, 0.0], [sign * m * 0.3, 1.0]], (0.0, 0.0)),
        RandOp::ShearY => affine(img, [[1.0, sign * m * 0.3], [0.0, 1.0]], (0.0, 0.0)),
        RandOp::Brightness => {
            let f = 1.0 + sign * 0.5 * m;
            map_pixels(img, |v| v * f)
        }
        RandOp::Contrast => {
            let mean = img.data.iter().sum::<f64>() / img.data.len() as f64;
            let f = 1.0 + sign * 0.5 * m;
            map_pixels(img, |v| mean + f * (v - mean))
        }
        RandOp::InvertLite => {
            let a = 0.5 * m;
            map_pixels(img, |v| (1.0 - a) * v + a * (1.0 - v))
        }
        RandOp::Posterize => {
            let bits = (8.0 - (4.0 * m).round()).max(1.0) as i32;
            let levels = f64::from((1 << bits) - 1);
            map_pixels(img, |v| (v.clamp(0.0, 1.0) * levels).round() / levels)
        }
    }
}

fn map_pixels(img: &Image, f: impl Fn(f64) -> f64) -> Image {
    let mut out = img.clone();
    for v in &mut out.data {
        *v = f(*v);
    }
    out
}

/// Weak: random resized crop + horizontal flip. Strong: weak followed by
/// `randaugment_ops` ops drawn with replacement from [`RAND_OPS`].
/// Output has the input's shape and is clipped to `[0, 1]`.
pub fn apply_augment(policy: &AugmentPolicy, image: &Image, seed: u64) -> Image {
    let mut r = rng::rng(seed);
    let mut out = random_resized_crop(image, policy.crop_scale_range, &mut r);
    if policy.flip_prob > 0.0 && r.random_bool(policy.flip_prob) {
        out = hflip(&out);
    }
    if policy.kind == AugmentKind::Strong {
        let m = f64::from(policy.randaugment_magnitude) / 10.0;
        for _ in 0..policy.randaugment_ops {
            let op = RAND_OPS[r.random_range(0..RAND_OPS.len())];
            out = apply_op(&out, op, m, &mut r);
        }
    }
    out.clamp01();
    out
}
