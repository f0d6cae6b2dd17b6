use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::similarity::{fsim, psnr, ssim, PSNR_CAP_DB};
use crate::dataset::{BoxProvider, FaceBox, ImageSample};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

/// Which similarity drives κ.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KappaMetric {
    #[default]
    Iou,
    Psnr,
    Ssim,
    Fsim,
}

/// A mixed pair and the quantities derived from it.
#[derive(Clone, Debug)]
pub struct MixPair<'a> {
    pub x_i: &'a ImageSample,
    pub x_j: &'a ImageSample,
    pub lambda: f64,
    pub kappa: f64,
    pub x_mixed: Image,
    pub y_mixed: Vec<f64>,
}

/// `(λ x_i + (1-λ) x_j, λ y_i + (1-λ) y_j)`.
pub fn mix_images(
    x_i: &Image,
    y_i: &[f64],
    x_j: &Image,
    y_j: &[f64],
    lambda: f64,
) -> Result<(Image, Vec<f64>)> {
    if !x_i.same_shape(x_j) {
        return Err(Error::Shape(format!(
            "cannot mix {}x{}x{} with {}x{}x{}",
            x_i.height, x_i.width, x_i.channels, x_j.height, x_j.width, x_j.channels
        )));
    }
    if y_i.len() != y_j.len() {
        return Err(Error::Shape(format!(
            "label widths differ: {} vs {}",
            y_i.len(),
            y_j.len()
        )));
    }
    let mut x = x_i.clone();
    for (o, b) in x.data.iter_mut().zip(&x_j.data) {
        *o = lambda * *o + (1.0 - lambda) * b;
    }
    let y = y_i
        .iter()
        .zip(y_j)
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    Ok((x, y))
}

/// One draw of `Beta(alpha, alpha)`.
pub fn sample_lambda(alpha: f64, seed: u64) -> Result<f64> {
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::Config(format!("Beta({alpha}, {alpha}): {e}")))?;
    let v: f64 = beta.sample(&mut rng::rng(seed));
    Ok(if v.is_nan() { 0.5 } else { v.clamp(0.0, 1.0) })
}

/// Intersection over union of two boxes.
pub fn iou(a: &FaceBox, b: &FaceBox) -> f64 {
    let ix0 = a.x0.max(b.x0);
    let iy0 = a.y0.max(b.y0);
    let ix1 = a.x1.min(b.x1);
    let iy1 = a.y1.min(b.y1);
    let inter = if ix0 < ix1 && iy0 < iy1 {
        u64::from(ix1 - ix0) * u64::from(iy1 - iy0)
    } else {
        0
    };
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// κ in `[0, 1]`: `1 - IoU` of face boxes, or one of the image-similarity
/// mappings `1 - min(1, PSNR/50)`, `1 - max(0, SSIM)`, `1 - FSIM`.
pub fn kappa(
    x_i: &ImageSample,
    x_j: &ImageSample,
    metric: KappaMetric,
    boxes: &BoxProvider,
) -> Result<f64> {
    let k = match metric {
        KappaMetric::Iou => {
            let bi = boxes.face_box(x_i)?;
            let bj = boxes.face_box(x_j)?;
            FaceBox::new(bi.x0, bi.y0, bi.x1, bi.y1)?;
            FaceBox::new(bj.x0, bj.y0, bj.x1, bj.y1)?;
            1.0 - iou(&bi, &bj)
        }
        KappaMetric::Psnr => 1.0 - (psnr(&x_i.image, &x_j.image)? / PSNR_CAP_DB).min(1.0),
        KappaMetric::Ssim => 1.0 - ssim(&x_i.image, &x_j.image)?.max(0.0),
        KappaMetric::Fsim => 1.0 - fsim(&x_i.image, &x_j.image)?,
    };
    Ok(k.clamp(0.0, 1.0))
}
