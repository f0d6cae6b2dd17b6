//! Supervised fine-tuning with Mixup-style virtual samples and
//! κ-weighted losses on the real images.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_augment, kappa, mix_images, sample_lambda, AugmentPolicy, KappaMetric};
use crate::autodiff::Var;
use crate::dataset::{BoxProvider, ImageSample};
use crate::error::{Error, Result};
use crate::evalkit::accuracy;
use crate::image::Image;
use crate::model::{Graph, ModelState};
use crate::optim::{batch_gradients, steps_per_epoch, AdamW, LrSchedule};
use crate::report::{num, write_csv};
use crate::rng;

/// Which combination of the virtual and real losses is minimized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FaceMixTag {
    /// `(1-κ) L_v + L_i + L_j`
    L1,
    /// `L_v + (1-κ)(L_i + L_j)`
    L2,
    /// `κ L_v + L_i + L_j`
    L3,
    /// `L_v + κ (L_i + L_j)`
    #[default]
    L4,
}

impl FaceMixTag {
    pub const ALL: [FaceMixTag; 4] = [FaceMixTag::L1, FaceMixTag::L2, FaceMixTag::L3, FaceMixTag::L4];

    /// `(a, b)` with loss `a L_v + b (L_i + L_j)`.
    pub fn coefficients(self, kappa: f64) -> (f64, f64) {
        match self {
            FaceMixTag::L1 => (1.0 - kappa, 1.0),
            FaceMixTag::L2 => (1.0, 1.0 - kappa),
            FaceMixTag::L3 => (kappa, 1.0),
            FaceMixTag::L4 => (1.0, kappa),
        }
    }
}

impl FromStr for FaceMixTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "L1" => Ok(FaceMixTag::L1),
            "L2" => Ok(FaceMixTag::L2),
            "L3" => Ok(FaceMixTag::L3),
            "L4" => Ok(FaceMixTag::L4),
            _ => Err(Error::Config(format!("unknown FaceMix variant {s:?}; expected L1, L2, L3 or L4"))),
        }
    }
}

impl fmt::Display for FaceMixTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaceMixVariant {
    pub tag: FaceMixTag,
    pub kappa_metric: KappaMetric,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixMode {
    /// Cross-entropy on weak views only.
    Plain,
    /// Virtual samples only (κ forced to 0, real-image terms dropped).
    Mixup,
    #[default]
    Facemix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_init_lr: f64,
    pub batch_size: usize,
    pub mode: MixMode,
    pub facemix: FaceMixVariant,
    /// Beta(α, α) parameter of the mixing ratio.
    pub alpha: f64,
    /// Labeled sets smaller than this train for `epochs * small_label_factor`.
    pub small_label_threshold: usize,
    pub small_label_factor: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub augment: AugmentPolicy,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            warmup_epochs: 5,
            base_lr: 1e-4,
            min_lr: 1e-5,
            warmup_init_lr: 5e-5,
            batch_size: 32,
            mode: MixMode::Facemix,
            facemix: FaceMixVariant::default(),
            alpha: 0.2,
            small_label_threshold: 500,
            small_label_factor: 10,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            augment: AugmentPolicy::weak(),
        }
    }
}

impl SupervisedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return Err(Error::Config(format!(
                "supervised.min_lr {} must lie in [0, base_lr {}]",
                self.min_lr, self.base_lr
            )));
        }
        if self.warmup_init_lr < 0.0 {
            return Err(Error::Config("supervised.warmup_init_lr is negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("supervised.batch_size must be positive".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("supervised.alpha {} must be positive", self.alpha)));
        }
        if self.small_label_factor == 0 {
            return Err(Error::Config("supervised.small_label_factor must be positive".into()));
        }
        self.augment.validate()
    }

    /// Epoch count after the small-label extension.
    pub fn effective_epochs(&self, n_labeled: usize) -> usize {
        if n_labeled < self.small_label_threshold {
            self.epochs * self.small_label_factor
        } else {
            self.epochs
        }
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// `-Σ_c ỹ_c log softmax(z)_c`.
pub fn soft_ce(logits: &[f64], soft_label: &[f64]) -> f64 {
    log_softmax(logits)
        .iter()
        .zip(soft_label)
        .filter(|(_, &t)| t != 0.0)
        .map(|(l, t)| -t * l)
        .sum()
}

pub fn cross_entropy(logits: &[f64], class: usize) -> f64 {
    -log_softmax(logits)[class]
}

pub fn facemix_loss(tag: FaceMixTag, l_v: f64, l_i: f64, l_j: f64, kappa: f64) -> f64 {
    let (a, b) = tag.coefficients(kappa);
    a * l_v + b * (l_i + l_j)
}

pub fn one_hot(class: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[class] = 1.0;
    v
}

/// One row of a weighted soft-target cross-entropy sum.
#[derive(Clone, Debug)]
pub struct LossItem {
    pub image: Image,
    pub target: Vec<f64>,
    pub weight: f64,
}

/// `Σ w · soft_ce` over a chunk of items on `g`.
pub fn items_loss(g: &mut Graph, chunk: &[LossItem]) -> Result<Var> {
    let patches = chunk
        .iter()
        .map(|it| g.image_patches(&it.image, false))
        .collect::<Result<Vec<_>>>()?;
    let logits = g.classify_logits_batch(&patches)?;
    let targets: Vec<f64> = chunk.iter().flat_map(|it| it.target.iter().copied()).collect();
    let weights: Vec<f64> = chunk.iter().map(|it| it.weight).collect();
    Ok(g.tape.weighted_soft_ce(logits, &targets, &weights))
}

/// Value and parameter gradient of `Σ w · soft_ce` over all items.
pub fn items_gradients(state: &ModelState, items: &[LossItem]) -> Result<(f64, crate::model::ModelGrads)> {
    batch_gradients(state, items, items_loss)
}

/// One mixed pair: sample `i` weighted by `lambda` against sample `j`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairPlan {
    pub i: usize,
    pub j: usize,
    pub lambda: f64,
    pub kappa: f64,
}

/// Shuffles the batch and pairs each position with its successor in the
/// shuffled order (cyclically), so nobody is paired with itself when the
/// batch holds two or more samples. λ and κ are drawn per pair.
pub fn plan_pairs(
    batch: &[&ImageSample],
    variant: &FaceMixVariant,
    mode: MixMode,
    alpha: f64,
    boxes: &BoxProvider,
    seed: u64,
) -> Result<Vec<PairPlan>> {
    let n = batch.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng(rng::derive(seed, "pairing")));
    let lam_seed = rng::derive(seed, "lambda");
    (0..n)
        .map(|k| {
            let (i, j) = (order[k], order[(k + 1) % n]);
            let lambda = sample_lambda(alpha, rng::derive_n(lam_seed, k as u64))?;
            let kappa = match mode {
                MixMode::Facemix => kappa(batch[i], batch[j], variant.kappa_metric, boxes)?,
                _ => 0.0,
            };
            Ok(PairPlan { i, j, lambda, kappa })
        })
        .collect()
}

/// Loss rows for a planned batch. `views` are the (augmented) images in
/// batch order. Virtual rows come first, then one real row per sample
/// carrying the summed coefficients of every pair it appears in. Rows
/// with zero weight are dropped; all weights are divided by the pair count.
pub fn facemix_items(
    views: &[Image],
    labels: &[usize],
    classes: usize,
    plan: &[PairPlan],
    tag: FaceMixTag,
    mode: MixMode,
) -> Result<Vec<LossItem>> {
    if views.len() != labels.len() {
        return Err(Error::Shape(format!("{} views for {} labels", views.len(), labels.len())));
    }
    let np = plan.len() as f64;
    let mut items = Vec::with_capacity(plan.len() + views.len());
    let mut real = vec![0.0; views.len()];
    for p in plan {
        let (a, b) = match mode {
            MixMode::Facemix => tag.coefficients(p.kappa),
            _ => (1.0, 0.0),
        };
        real[p.i] += b;
        real[p.j] += b;
        if a != 0.0 {
            let (x, y) = mix_images(
                &views[p.i],
                &one_hot(labels[p.i], classes),
                &views[p.j],
                &one_hot(labels[p.j], classes),
                p.lambda,
            )?;
            items.push(LossItem {
                image: x,
                target: y,
                weight: a / np,
            });
        }
    }
    for (k, w) in real.into_iter().enumerate() {
        if w != 0.0 {
            items.push(LossItem {
                image: views[k].clone(),
                target: one_hot(labels[k], classes),
                weight: w / np,
            });
        }
    }
    Ok(items)
}

/// Rows of a plain cross-entropy mean.
pub fn plain_items(views: &[Image], labels: &[usize], classes: usize, weight: f64) -> Vec<LossItem> {
    views
        .iter()
        .zip(labels)
        .map(|(v, &y)| LossItem {
            image: v.clone(),
            target: one_hot(y, classes),
            weight,
        })
        .collect()
}

fn labels_of(batch: &[&ImageSample], classes: usize) -> Result<Vec<usize>> {
    batch
        .iter()
        .map(|s| {
            s.validate(classes)?;
            s.label
                .ok_or_else(|| Error::Config(format!("sample {} has no label", s.id)))
        })
        .collect()
}

/// Loss rows of one training batch: weak views, then pairing and mixing
/// per `mode`. A batch of one falls back to plain cross-entropy.
pub fn batch_items(
    batch: &[&ImageSample],
    cfg: &SupervisedConfig,
    classes: usize,
    boxes: &BoxProvider,
    seed: u64,
) -> Result<Vec<LossItem>> {
    let labels = labels_of(batch, classes)?;
    let aug_seed = rng::derive(seed, "augment");
    let views: Vec<Image> = batch
        .par_iter()
        .enumerate()
        .map(|(k, s)| apply_augment(&cfg.augment, &s.image, rng::derive_n(aug_seed, k as u64)))
        .collect();
    if cfg.mode == MixMode::Plain || batch.len() < 2 {
        if cfg.mode != MixMode::Plain {
            log::warn!("mixing needs two samples; batch of one uses plain cross-entropy");
        }
        return Ok(plain_items(&views, &labels, classes, 1.0 / batch.len() as f64));
    }
    let plan = plan_pairs(batch, &cfg.facemix, cfg.mode, cfg.alpha, boxes, seed)?;
    facemix_items(&views, &labels, classes, &plan, cfg.facemix.tag, cfg.mode)
}

/// Mean FaceMix loss of one batch under `state`.
pub fn facemix_batch_loss(
    state: &ModelState,
    batch: &[&ImageSample],
    cfg: &SupervisedConfig,
    boxes: &BoxProvider,
    seed: u64,
) -> Result<f64> {
    let items = batch_items(batch, cfg, state.config.class_count, boxes, seed)?;
    let logits = crate::model::classify_batch(state, &items.iter().map(|it| &it.image).collect::<Vec<_>>())?;
    Ok(logits
        .iter()
        .zip(&items)
        .map(|(z, it)| it.weight * soft_ce(z, &it.target))
        .sum())
}

/// One optimizer step on `Σ w · soft_ce`; returns the loss before the step.
pub(crate) fn step_on_items(
    state: &mut ModelState,
    opt: &mut AdamW,
    items: &[LossItem],
    lr: f64,
    stage: &'static str,
    epoch: usize,
) -> Result<f64> {
    let (loss, grads) = items_gradients(state, items)?;
    let diverged = |loss: f64| Error::Diverged { stage, epoch, loss };
    if !loss.is_finite() {
        return Err(diverged(loss));
    }
    opt.step(state, &grads, lr).map_err(|_| diverged(loss))?;
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisedEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub eval_acc: f64,
}

#[derive(Clone, Debug)]
pub struct SupervisedOutcome {
    pub state: ModelState,
    pub best: ModelState,
    pub best_epoch: usize,
    pub best_acc: f64,
    pub history: Vec<SupervisedEpoch>,
}

fn batch_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    rng::derive_n(rng::derive_n(rng::derive(seed, "batch"), epoch as u64), batch as u64)
}

/// Fine-tunes `state` on `labeled`. Accuracy is measured on `eval` after
/// every epoch, or on the labeled images when no evaluation set is given.
pub fn run_supervised(
    cfg: &SupervisedConfig,
    mut state: ModelState,
    labeled: &[ImageSample],
    eval: Option<&[ImageSample]>,
    boxes: &BoxProvider,
    seed: u64,
) -> Result<SupervisedOutcome> {
    cfg.validate()?;
    let classes = state.config.class_count;
    for s in labeled {
        s.validate(classes)?;
        if s.label.is_none() {
            return Err(Error::Config(format!("labeled sample {} has no label", s.id)));
        }
    }
    let epochs = cfg.effective_epochs(labeled.len());
    if epochs == 0 {
        return Ok(SupervisedOutcome {
            best: state.clone(),
            state,
            best_epoch: 0,
            best_acc: f64::NAN,
            history: Vec::new(),
        });
    }
    if labeled.is_empty() {
        return Err(Error::Empty("labeled training set".into()));
    }
    let eval = eval.filter(|e| !e.is_empty()).unwrap_or(labeled);
    let spe = steps_per_epoch(labeled.len(), cfg.batch_size);
    let sched = LrSchedule {
        warmup_init_lr: cfg.warmup_init_lr,
        base_lr: cfg.base_lr,
        min_lr: cfg.min_lr,
        warmup_steps: cfg.warmup_epochs * spe,
        total_steps: epochs * spe,
    };
    let mut opt = AdamW::new(&state, cfg.betas, cfg.weight_decay);
    let mut history = Vec::with_capacity(epochs);
    let mut best = state.clone();
    let (mut best_epoch, mut best_acc) = (0, f64::NEG_INFINITY);
    let mut step = 0;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        order.shuffle(&mut rng::rng(rng::derive_n(rng::derive(seed, "order"), epoch as u64)));
        let lr0 = sched.lr(step);
        let mut total = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&ImageSample> = idx.iter().map(|&i| &labeled[i]).collect();
            let items = batch_items(&batch, cfg, classes, boxes, batch_seed(seed, epoch, b))?;
            let loss = step_on_items(&mut state, &mut opt, &items, sched.lr(step), "supervised", epoch + 1)?;
            total += loss * idx.len() as f64;
            step += 1;
        }
        let loss = total / labeled.len() as f64;
        let acc = accuracy(&state, eval)?;
        log::info!("supervised epoch {} lr {lr0:.3e} loss {loss:.5} acc {acc:.4}", epoch + 1);
        if acc > best_acc {
            best_acc = acc;
            best_epoch = epoch + 1;
            best.copy_from(&state)?;
        }
        history.push(SupervisedEpoch {
            epoch: epoch + 1,
            lr: lr0,
            loss,
            eval_acc: acc,
        });
    }
    Ok(SupervisedOutcome {
        state,
        best,
        best_epoch,
        best_acc,
        history,
    })
}

pub fn write_history_csv(path: &Path, history: &[SupervisedEpoch]) -> Result<()> {
    let rows: Vec<Vec<String>> = history
        .iter()
        .map(|h| vec![h.epoch.to_string(), num(h.lr), num(h.loss), num(h.eval_acc)])
        .collect();
    write_csv(path, &["epoch", "lr", "loss", "eval_acc"], &rows)
}
