//! Full-reference image similarity: PSNR, SSIM and a simplified FSIM.

use super::KappaMetric;
use crate::error::{Error, Result};
use crate::image::Image;

/// PSNR reported for identical images; also the upper clamp.
pub const PSNR_CAP_DB: f64 = 50.0;

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_WINDOW: usize = 7;
const SSIM_SIGMA: f64 = 1.5;

// FSIM stabilizers, rescaled for the [0,1] range
const FSIM_T_PC: f64 = 1e-3;
const FSIM_T_G: f64 = 2.5e-3;

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "similarity of {}x{}x{} and {}x{}x{}",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        )));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` in dB over all channels, clamped to [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" correlation.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Separable "same" correlation with replicated borders.
fn filter_same(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let clampi = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * img[y * w + clampi(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[clampi(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM on channel-mean grayscale with a 7×7 Gaussian window
/// (σ = 1.5), valid positions only.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let (h, w) = (a.height, a.width);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let x = a.grayscale();
    let y = b.grayscale();
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let (mx, _, _) = filter_valid(&x, h, w, &k);
    let (my, _, _) = filter_valid(&y, h, w, &k);
    let (sxx, _, _) = filter_valid(&xx, h, w, &k);
    let (syy, _, _) = filter_valid(&yy, h, w, &k);
    let (sxy, _, _) = filter_valid(&xy, h, w, &k);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cov = sxy[i] - ux * uy;
        total += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    Ok(total / mx.len() as f64)
}

fn gradient_magnitude(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| {
        img[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize]
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            // Scharr, normalized to a per-pixel central difference
            let gx = (3.0 * (at(y - 1, x + 1) - at(y - 1, x - 1))
                + 10.0 * (at(y, x + 1) - at(y, x - 1))
                + 3.0 * (at(y + 1, x + 1) - at(y + 1, x - 1)))
                / 32.0;
            let gy = (3.0 * (at(y + 1, x - 1) - at(y - 1, x - 1))
                + 10.0 * (at(y + 1, x) - at(y - 1, x))
                + 3.0 * (at(y + 1, x + 1) - at(y - 1, x + 1)))
                / 32.0;
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Band-pass energy |G_1 * I - G_2 * I| standing in for phase congruency.
fn band_energy(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let fine = filter_same(img, h, w, &gaussian_kernel(7, 1.0));
    let coarse = filter_same(img, h, w, &gaussian_kernel(13, 2.0));
    fine.iter().zip(&coarse).map(|(a, b)| (a - b).abs()).collect()
}

/// Simplified FSIM: gradient-magnitude and band-energy similarity,
/// pooled with the larger band energy as weight.
pub fn fsim(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let (h, w) = (a.height, a.width);
    let x = a.grayscale();
    let y = b.grayscale();
    let (g1, g2) = (gradient_magnitude(&x, h, w), gradient_magnitude(&y, h, w));
    let (p1, p2) = (band_energy(&x, h, w), band_energy(&y, h, w));
    let mut num = 0.0;
    let mut den = 0.0;
    let mut plain = 0.0;
    for i in 0..h * w {
        let s_pc = (2.0 * p1[i] * p2[i] + FSIM_T_PC) / (p1[i] * p1[i] + p2[i] * p2[i] + FSIM_T_PC);
        let s_g = (2.0 * g1[i] * g2[i] + FSIM_T_G) / (g1[i] * g1[i] + g2[i] * g2[i] + FSIM_T_G);
        let s = s_pc * s_g;
        let wgt = p1[i].max(p2[i]);
        num += s * wgt;
        den += wgt;
        plain += s;
    }
    if den <= f64::EPSILON {
        return Ok(plain / (h * w) as f64);
    }
    Ok(num / den)
}

/// PSNR in dB, or SSIM / FSIM; `KappaMetric::Iou` is not an image metric.
pub fn image_similarity(metric: KappaMetric, a: &Image, b: &Image) -> Result<f64> {
    match metric {
        KappaMetric::Psnr => psnr(a, b),
        KappaMetric::Ssim => ssim(a, b),
        KappaMetric::Fsim => fsim(a, b),
        KappaMetric::Iou => Err(Error::Config("IoU compares boxes, not images".into())),
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng as _;

    use super::*;
    use crate::rng;

    fn random(seed: u64, h: usize, w: usize) -> Image {
        let mut r = rng::rng(seed);
        Image::from_vec(h, w, 3, (0..h * w * 3).map(|_| r.random()).collect()).unwrap()
    }

    #[test]
    fn identical_images() {
        let a = random(1, 16, 16);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((fsim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let flat = Image::filled(8, 8, 1, 0.3);
        assert!((fsim(&flat, &flat).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_of_known_mse() {
        let a = Image::filled(4, 4, 1, 0.2);
        let b = Image::filled(4, 4, 1, 0.3); // MSE = 0.01
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn metrics_are_symmetric_and_decrease_with_noise() {
        let a = random(2, 16, 16);
        let mut b = a.clone();
        let mut c = a.clone();
        let mut r = rng::rng(3);
        for (vb, vc) in b.data.iter_mut().zip(c.data.iter_mut()) {
            let n: f64 = r.random_range(-1.0..1.0);
            *vb = (*vb + 0.05 * n).clamp(0.0, 1.0);
            *vc = (*vc + 0.3 * n).clamp(0.0, 1.0);
        }
        for f in [psnr, ssim, fsim] {
            let ab = f(&a, &b).unwrap();
            assert!((ab - f(&b, &a).unwrap()).abs() < 1e-12);
            assert!(ab > f(&a, &c).unwrap());
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = random(1, 8, 8);
        let b = random(1, 8, 9);
        assert!(psnr(&a, &b).is_err());
        assert!(ssim(&a, &b).is_err());
        assert!(fsim(&a, &b).is_err());
        assert!(ssim(&random(1, 5, 5), &random(2, 5, 5)).is_err());
    }
}
