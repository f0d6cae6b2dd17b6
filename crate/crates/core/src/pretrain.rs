//! Masked-patch reconstruction pretraining.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::ImageSample;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{patchify, sample_mask, unpatchify, Graph, MaskPattern, ModelConfig, ModelState};
use crate::optim::{batch_gradients, steps_per_epoch, AdamW, LrSchedule};
use crate::report::{num, write_csv};
use crate::rng;
use crate::tensor::Matrix;

const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub batch_size: usize,
    pub mask_ratio: f64,
    pub normalize_targets: bool,
    pub weight_decay: f64,
    pub betas: (f64, f64),
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 600,
            warmup_epochs: 50,
            base_lr: 3.4e-4,
            min_lr: 0.0,
            batch_size: 256,
            mask_ratio: 0.75,
            normalize_targets: true,
            weight_decay: 0.05,
            betas: (0.9, 0.95),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("pretrain.mask_ratio {} outside (0,1)", self.mask_ratio)));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "pretrain.warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 || !(self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return Err(Error::Config("pretrain needs batch_size > 0 and 0 <= min_lr <= base_lr".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub state: ModelState,
    pub history: Vec<EpochLoss>,
    /// Smallest and largest masked-patch count seen over all steps.
    pub mask_count_range: Option<(usize, usize)>,
}

/// Mean and floored standard deviation; `None` for the standard deviation
/// of rows flatter than the floor.
fn row_stats(row: &[f64]) -> (f64, Option<f64>) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let std = (row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    (mean, if std < STD_FLOOR { None } else { Some(std) })
}

/// Masked rows standardized by their own mean and standard deviation when
/// `normalize` is set; all other rows are copied unchanged. A masked row
/// whose spread is below the floor becomes all zeros.
pub fn recon_targets(patches: &Matrix, mask: &MaskPattern, normalize: bool) -> Matrix {
    let mut t = patches.clone();
    if normalize {
        for &r in &mask.masked {
            let (mean, std) = row_stats(patches.row(r));
            for v in t.row_mut(r) {
                *v = std.map_or(0.0, |s| (*v - mean) / s);
            }
        }
    }
    t
}

/// Mean squared error over the entries of masked rows.
pub fn recon_loss(pred: &Matrix, targets: &Matrix, mask: &MaskPattern) -> Result<f64> {
    if pred.shape() != targets.shape() || pred.rows != mask.n_patches {
        return Err(Error::Shape(format!(
            "prediction {:?}, targets {:?}, {} patches",
            pred.shape(),
            targets.shape(),
            mask.n_patches
        )));
    }
    if mask.masked.is_empty() {
        return Err(Error::Empty("reconstruction loss needs at least one masked patch".into()));
    }
    let mut total = 0.0;
    for &r in &mask.masked {
        for (p, t) in pred.row(r).iter().zip(targets.row(r)) {
            total += (p - t) * (p - t);
        }
    }
    Ok(total / (mask.masked.len() * pred.cols) as f64)
}

/// Builds the summed masked reconstruction loss of several images on `g`.
pub fn recon_graph_loss(
    g: &mut Graph,
    items: &[(&Image, &MaskPattern)],
    normalize: bool,
) -> Result<crate::autodiff::Var> {
    if items.iter().any(|(_, m)| m.masked.is_empty()) {
        return Err(Error::Empty("reconstruction loss needs at least one masked patch".into()));
    }
    let mut vis = Vec::with_capacity(items.len());
    let mut targets = Vec::with_capacity(items.len());
    for (image, mask) in items {
        let p = g.image_patches(image, false)?;
        targets.push(recon_targets(g.tape.value(p), mask, normalize));
        vis.push(g.tape.gather_rows(p, &mask.visible));
    }
    let idx: Vec<&[usize]> = items.iter().map(|(_, m)| m.visible.as_slice()).collect();
    let enc = g.encode_batch(&vis, &idx)?;
    let masks: Vec<&MaskPattern> = items.iter().map(|(_, m)| *m).collect();
    let pred = g.decode_batch(enc, &masks)?;
    let n = g.state().config.n_patches();
    let plen = g.state().config.patch_len();
    let mut terms = Vec::with_capacity(items.len());
    for (b, (t, (_, mask))) in targets.into_iter().zip(items).enumerate() {
        let pb = if items.len() == 1 { pred } else { g.tape.slice_block(pred, b * n, n, 0, plen) };
        let tv = g.tape.leaf(t, false);
        terms.push((g.tape.masked_mse(pb, tv, &mask.masked), 1.0));
    }
    Ok(g.tape.weighted_sum(&terms))
}

fn mask_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    rng::derive_n(rng::derive_n(rng::derive(seed, "mask"), epoch as u64), index as u64)
}

/// Trains from a fresh initialization derived from `seed`.
pub fn run_pretrain(
    cfg: &PretrainConfig,
    model: &ModelConfig,
    images: &[&Image],
    seed: u64,
) -> Result<PretrainOutcome> {
    let state = ModelState::new(model, rng::derive(seed, "init"))?;
    pretrain_from(cfg, state, images, seed)
}

pub fn pretrain_from(
    cfg: &PretrainConfig,
    mut state: ModelState,
    images: &[&Image],
    seed: u64,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Empty("pretraining set".into()));
    }
    let n_patches = state.config.n_patches();
    let spe = steps_per_epoch(images.len(), cfg.batch_size);
    let sched = LrSchedule {
        warmup_init_lr: 0.0,
        base_lr: cfg.base_lr,
        min_lr: cfg.min_lr,
        warmup_steps: cfg.warmup_epochs * spe,
        total_steps: cfg.epochs * spe,
    };
    let mut opt = AdamW::new(&state, cfg.betas, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut range: Option<(usize, usize)> = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut rng::rng(rng::derive_n(rng::derive(seed, "order"), epoch as u64)));
        let lr0 = sched.lr(step);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let items: Vec<(usize, MaskPattern)> = batch
                .iter()
                .map(|&i| (i, sample_mask(n_patches, cfg.mask_ratio, mask_seed(seed, epoch, i))))
                .collect();
            for (_, m) in &items {
                let c = m.masked.len();
                range = Some(range.map_or((c, c), |(lo, hi)| (lo.min(c), hi.max(c))));
            }
            let (loss, mut grads) = batch_gradients(&state, &items, |g, chunk| {
                let pairs: Vec<(&Image, &MaskPattern)> = chunk.iter().map(|(i, m)| (images[*i], m)).collect();
                recon_graph_loss(g, &pairs, cfg.normalize_targets)
            })?;
            let diverged = |loss: f64| Error::Diverged {
                stage: "pretrain",
                epoch: epoch + 1,
                loss,
            };
            if !loss.is_finite() {
                return Err(diverged(loss));
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.step(&mut state, &grads, sched.lr(step)).map_err(|_| diverged(loss))?;
            epoch_loss += loss;
            step += 1;
        }
        let loss = epoch_loss / images.len() as f64;
        log::info!("pretrain epoch {} lr {lr0:.3e} loss {loss:.5}", epoch + 1);
        history.push(EpochLoss {
            epoch: epoch + 1,
            lr: lr0,
            loss,
        });
    }
    Ok(PretrainOutcome {
        state,
        history,
        mask_count_range: range,
    })
}

pub fn write_loss_csv(path: &Path, history: &[EpochLoss]) -> Result<()> {
    let rows: Vec<Vec<String>> = history
        .iter()
        .map(|h| vec![h.epoch.to_string(), num(h.lr), num(h.loss)])
        .collect();
    write_csv(path, &["epoch", "lr", "loss"], &rows)
}

/// Pixel-space reconstruction: masked patches are predicted (and
/// de-normalized with the true patch statistics when targets were
/// normalized), visible patches are copied from the input.
pub fn reconstruct(state: &ModelState, image: &Image, mask: &MaskPattern, normalize: bool) -> Result<Image> {
    let c = &state.config;
    let mut g = Graph::new(state, false);
    let p = g.image_patches(image, false)?;
    let vis = g.tape.gather_rows(p, &mask.visible);
    let enc = g.encode(vis, &mask.visible)?;
    let pred = g.decode(enc, mask)?;
    let mut out = g.tape.value(p).clone();
    let pv = g.tape.value(pred);
    for &r in &mask.masked {
        let (mean, std) = if normalize {
            let (m, s) = row_stats(out.row(r));
            (m, s.unwrap_or(STD_FLOOR))
        } else {
            (0.0, 1.0)
        };
        let src: Vec<f64> = pv.row(r).iter().map(|v| v * std + mean).collect();
        out.row_mut(r).copy_from_slice(&src);
    }
    unpatchify(&out, c.patch_size, c.image_size, c.image_size, c.channels)
}

/// Image with masked patches grayed out.
pub fn masked_view(image: &Image, mask: &MaskPattern, patch: usize) -> Result<Image> {
    let mut m = patchify(image, patch)?;
    for &r in &mask.masked {
        m.row_mut(r).fill(0.5);
    }
    unpatchify(&m, patch, image.height, image.width, image.channels)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaskRatioRow {
    pub ratio: f64,
    pub final_train_loss: f64,
    /// Pixel MSE over masked pixels.
    pub masked_mse: f64,
    /// Pixel MSE over masked eye and mouth pixels; NaN without masks.
    pub expression_mse: f64,
}

#[derive(Clone, Debug)]
pub struct MaskRatioReport {
    pub rows: Vec<MaskRatioRow>,
    /// Per ratio: original, masked input and reconstruction of each shown
    /// sample.
    pub grids: Vec<Vec<Vec<Image>>>,
}

/// Pretrains one model per ratio and scores its reconstructions of `eval`.
pub fn mask_ratio_study(
    ratios: &[f64],
    cfg: &PretrainConfig,
    model: &ModelConfig,
    train: &[&Image],
    eval: &[ImageSample],
    shown: usize,
    seed: u64,
) -> Result<MaskRatioReport> {
    let mut rows = Vec::with_capacity(ratios.len());
    let mut grids = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let run_cfg = PretrainConfig {
            mask_ratio: ratio,
            ..cfg.clone()
        };
        run_cfg.validate()?;
        let model_cfg = ModelConfig {
            mask_ratio: ratio,
            ..model.clone()
        };
        let out = run_pretrain(&run_cfg, &model_cfg, train, seed)?;
        let n_patches = model_cfg.n_patches();
        let (mut sq, mut count, mut esq, mut ecount) = (0.0, 0usize, 0.0, 0usize);
        let mut grid = Vec::new();
        for (k, s) in eval.iter().enumerate() {
            let mask = sample_mask(n_patches, ratio, rng::derive_n(rng::derive(seed, "study-mask"), k as u64));
            let rec = reconstruct(&out.state, &s.image, &mask, cfg.normalize_targets)?;
            let pm = patch_membership(&mask, &model_cfg);
            let (h, w, ch) = (s.image.height, s.image.width, s.image.channels);
            for y in 0..h {
                for x in 0..w {
                    if !pm[y * w + x] {
                        continue;
                    }
                    let e: f64 = (0..ch)
                        .map(|c| (rec.get(y, x, c) - s.image.get(y, x, c)).powi(2))
                        .sum();
                    sq += e;
                    count += ch;
                    if s.expression_mask.as_ref().is_some_and(|m| m[y * w + x]) {
                        esq += e;
                        ecount += ch;
                    }
                }
            }
            if k < shown {
                let mut clipped = rec;
                clipped.clamp01();
                grid.push(vec![
                    s.image.clone(),
                    masked_view(&s.image, &mask, model_cfg.patch_size)?,
                    clipped,
                ]);
            }
        }
        let final_train_loss = out.history.last().map_or(f64::NAN, |h| h.loss);
        rows.push(MaskRatioRow {
            ratio,
            final_train_loss,
            masked_mse: if count > 0 { sq / count as f64 } else { f64::NAN },
            expression_mse: if ecount > 0 { esq / ecount as f64 } else { f64::NAN },
        });
        grids.push(grid);
    }
    Ok(MaskRatioReport { rows, grids })
}

/// Per-pixel flag: does the pixel belong to a masked patch?
fn patch_membership(mask: &MaskPattern, c: &ModelConfig) -> Vec<bool> {
    let (g, p, size) = (c.grid(), c.patch_size, c.image_size);
    let mut out = vec![false; size * size];
    for &m in &mask.masked {
        let (py, px) = (m / g, m % g);
        for y in py * p..(py + 1) * p {
            for x in px * p..(px + 1) * p {
                out[y * size + x] = true;
            }
        }
    }
    out
}
