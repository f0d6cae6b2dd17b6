use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;
use crate::tensor::Matrix;

/// Splits `image` into non-overlapping `p×p` patches in row-major patch
/// order; each row holds one patch flattened as (y, x, channel).
pub fn patchify(image: &Image, p: usize) -> Result<Matrix> {
    if p == 0 || image.height % p != 0 || image.width % p != 0 {
        return Err(Error::Shape(format!(
            "{}x{} image not divisible into {p}x{p} patches",
            image.height, image.width
        )));
    }
    let (gh, gw, c) = (image.height / p, image.width / p, image.channels);
    let len = p * p * c;
    let mut m = Matrix::zeros(gh * gw, len);
    for py in 0..gh {
        for px in 0..gw {
            let row = m.row_mut(py * gw + px);
            for dy in 0..p {
                let start = image.idx(py * p + dy, px * p, 0);
                row[dy * p * c..(dy + 1) * p * c].copy_from_slice(&image.data[start..start + p * c]);
            }
        }
    }
    Ok(m)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Matrix, p: usize, height: usize, width: usize, channels: usize) -> Result<Image> {
    if p == 0 || height % p != 0 || width % p != 0 {
        return Err(Error::Shape(format!("{height}x{width} not divisible by patch {p}")));
    }
    let (gh, gw) = (height / p, width / p);
    if patches.shape() != (gh * gw, p * p * channels) {
        return Err(Error::Shape(format!(
            "patch matrix {:?} does not match {height}x{width}x{channels} with patch {p}",
            patches.shape()
        )));
    }
    let mut img = Image::new(height, width, channels);
    let c = channels;
    for py in 0..gh {
        for px in 0..gw {
            let row = patches.row(py * gw + px);
            for dy in 0..p {
                let start = img.idx(py * p + dy, px * p, 0);
                img.data[start..start + p * c].copy_from_slice(&row[dy * p * c..(dy + 1) * p * c]);
            }
        }
    }
    Ok(img)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPattern {
    pub n_patches: usize,
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
}

impl MaskPattern {
    /// All patches visible.
    pub fn none(n_patches: usize) -> Self {
        Self {
            n_patches,
            masked: Vec::new(),
            visible: (0..n_patches).collect(),
        }
    }

    pub fn from_masked(n_patches: usize, mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.last().is_some_and(|&m| m >= n_patches) {
            return Err(Error::Shape(format!("masked index beyond {n_patches} patches")));
        }
        let mut is_masked = vec![false; n_patches];
        for &m in &masked {
            is_masked[m] = true;
        }
        let visible = (0..n_patches).filter(|&i| !is_masked[i]).collect();
        Ok(Self {
            n_patches,
            masked,
            visible,
        })
    }

    pub fn mask_count(n_patches: usize, rho: f64) -> usize {
        // tolerance keeps products like 0.29 * 100 from flooring to 28
        ((rho * n_patches as f64 + 1e-9).floor() as usize).min(n_patches)
    }
}

/// Masks `floor(ρ·N_p)` patches drawn uniformly without replacement.
pub fn sample_mask(n_patches: usize, rho: f64, seed: u64) -> MaskPattern {
    let count = MaskPattern::mask_count(n_patches, rho);
    let mut idx: Vec<usize> = (0..n_patches).collect();
    idx.shuffle(&mut rng::rng(seed));
    idx.truncate(count);
    MaskPattern::from_masked(n_patches, idx).expect("indices in range")
}
