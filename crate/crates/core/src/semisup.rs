//! Semi-supervised fine-tuning: a mean teacher produces confidence-gated
//! pseudo-labels for strongly augmented unlabeled views.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_augment, AugmentPolicy};
use crate::autodiff::softmax_in_place;
use crate::dataset::ImageSample;
use crate::error::{Error, Result};
use crate::evalkit::{accuracy, argmax};
use crate::image::Image;
use crate::model::{classify_batch, ModelState};
use crate::optim::{AdamW, LrSchedule};
use crate::report::{num, write_csv};
use crate::rng;
use crate::supervised::{cross_entropy, one_hot, plain_items, step_on_items, LossItem};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemiMode {
    #[default]
    EmaTeacher,
    /// One shared model labels its own weak views.
    Fixmatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemiSupConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub batch_size: usize,
    pub unlabeled_batch_size: usize,
    pub tau: f64,
    pub mu: f64,
    pub momentum: f64,
    pub mode: SemiMode,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub weak: AugmentPolicy,
    pub strong: AugmentPolicy,
}

impl Default for SemiSupConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            warmup_epochs: 0,
            base_lr: 1.5e-4,
            min_lr: 1e-5,
            batch_size: 64,
            unlabeled_batch_size: 64,
            tau: 0.95,
            mu: 1.0,
            momentum: 0.999,
            mode: SemiMode::EmaTeacher,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            weak: AugmentPolicy::weak(),
            strong: AugmentPolicy::strong(),
        }
    }
}

impl SemiSupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("semisup.tau {} outside (0,1)", self.tau)));
        }
        if !(self.mu >= 0.0) {
            return Err(Error::Config(format!("semisup.mu {} must be >= 0", self.mu)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("semisup.momentum {} outside [0,1]", self.momentum)));
        }
        if self.batch_size == 0 || self.unlabeled_batch_size == 0 {
            return Err(Error::Config("semisup batch sizes must be positive".into()));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return Err(Error::Config("semisup needs 0 <= min_lr <= base_lr".into()));
        }
        self.weak.validate()?;
        self.strong.validate()
    }
}

/// `θ_t ← m θ_t + (1 - m) θ_s`, elementwise.
pub fn ema_update(teacher: &mut ModelState, student: &ModelState, m: f64) -> Result<()> {
    teacher.check_compatible(student)?;
    for (t, s) in teacher.params.iter_mut().zip(&student.params) {
        for (a, b) in t.value.data.iter_mut().zip(&s.value.data) {
            *a = m * *a + (1.0 - m) * b;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelBatch {
    pub classes: Vec<usize>,
    pub confidences: Vec<f64>,
    pub accept_mask: Vec<bool>,
}

impl PseudoLabelBatch {
    pub fn accept_rate(&self) -> f64 {
        if self.accept_mask.is_empty() {
            return 0.0;
        }
        self.accept_mask.iter().filter(|&&a| a).count() as f64 / self.accept_mask.len() as f64
    }
}

/// Argmax class and its probability per row; accepted when the
/// probability exceeds `tau`.
pub fn pseudo_label(probs: &[Vec<f64>], tau: f64) -> PseudoLabelBatch {
    let classes: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let confidences: Vec<f64> = probs.iter().zip(&classes).map(|(p, &c)| p[c]).collect();
    let accept_mask = confidences.iter().map(|&c| c > tau).collect();
    PseudoLabelBatch {
        classes,
        confidences,
        accept_mask,
    }
}

/// `(1/N_U) Σ 1[conf > τ] CE(z, ŷ)` over the whole unlabeled batch.
pub fn unlabeled_loss(student_logits: &[Vec<f64>], pl: &PseudoLabelBatch, tau: f64) -> f64 {
    if student_logits.is_empty() {
        return 0.0;
    }
    let total: f64 = student_logits
        .iter()
        .zip(pl.classes.iter().zip(&pl.confidences))
        .filter(|(_, (_, &conf))| conf > tau)
        .map(|(z, (&c, _))| cross_entropy(z, c))
        .sum();
    total / student_logits.len() as f64
}

pub fn total_loss(l_l: f64, l_u: f64, mu: f64) -> f64 {
    l_l + mu * l_u
}

/// Loss rows of one step: labeled weak views weighted `1/N_L`, then
/// accepted strong views weighted `μ/N_U` against their pseudo-labels.
pub fn semisup_items(
    labeled_views: &[Image],
    labels: &[usize],
    strong_views: &[Image],
    pl: &PseudoLabelBatch,
    mu: f64,
    classes: usize,
) -> Vec<LossItem> {
    let mut items = plain_items(labeled_views, labels, classes, 1.0 / labeled_views.len().max(1) as f64);
    let w = mu / strong_views.len().max(1) as f64;
    if w != 0.0 {
        for (k, v) in strong_views.iter().enumerate() {
            if pl.accept_mask[k] {
                items.push(LossItem {
                    image: v.clone(),
                    target: one_hot(pl.classes[k], classes),
                    weight: w,
                });
            }
        }
    }
    items
}

/// Pseudo-labels from `model` on `views`, without building a trainable
/// graph.
pub fn pseudo_label_views(model: &ModelState, views: &[Image], tau: f64) -> Result<PseudoLabelBatch> {
    let refs: Vec<&Image> = views.iter().collect();
    let mut probs = classify_batch(model, &refs)?;
    for p in &mut probs {
        softmax_in_place(p);
    }
    Ok(pseudo_label(&probs, tau))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemiSupEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub accept_rate: f64,
    pub teacher_acc: f64,
    pub student_acc: f64,
}

#[derive(Clone, Debug)]
pub struct SemiSupOutcome {
    pub student: ModelState,
    pub teacher: ModelState,
    pub mode: SemiMode,
    pub history: Vec<SemiSupEpoch>,
}

impl SemiSupOutcome {
    /// The model used for evaluation: the teacher, or the single shared
    /// model in FixMatch mode.
    pub fn model(&self) -> &ModelState {
        match self.mode {
            SemiMode::EmaTeacher => &self.teacher,
            SemiMode::Fixmatch => &self.student,
        }
    }
}

fn views(policy: &AugmentPolicy, samples: &[&ImageSample], seed: u64) -> Vec<Image> {
    samples
        .par_iter()
        .enumerate()
        .map(|(k, s)| apply_augment(policy, &s.image, rng::derive_n(seed, k as u64)))
        .collect()
}

/// Endless labeled index stream, reshuffled on every pass.
struct LabeledStream {
    n: usize,
    seed: u64,
    pass: u64,
    order: Vec<usize>,
    pos: usize,
}

impl LabeledStream {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            pass: 0,
            order: Vec::new(),
            pos: 0,
        }
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order = (0..self.n).collect();
                self.order.shuffle(&mut rng::rng(rng::derive_n(self.seed, self.pass)));
                self.pass += 1;
                self.pos = 0;
            }
            let m = (k - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + m]);
            self.pos += m;
        }
        out
    }
}

/// Fine-tunes `state` on labeled and unlabeled images. One epoch is one
/// pass over the unlabeled set, or over the labeled set when there are no
/// unlabeled images. `eval` defaults to the labeled set.
pub fn run_semisup(
    cfg: &SemiSupConfig,
    state: ModelState,
    labeled: &[ImageSample],
    unlabeled: &[ImageSample],
    eval: Option<&[ImageSample]>,
    seed: u64,
) -> Result<SemiSupOutcome> {
    cfg.validate()?;
    let classes = state.config.class_count;
    for s in labeled {
        s.validate(classes)?;
    }
    let labels: Vec<usize> = labeled
        .iter()
        .map(|s| s.label.ok_or_else(|| Error::Config(format!("labeled sample {} has no label", s.id))))
        .collect::<Result<_>>()?;
    let mut student = state;
    let mut teacher = student.clone();
    if cfg.epochs == 0 {
        return Ok(SemiSupOutcome {
            student,
            teacher,
            mode: cfg.mode,
            history: Vec::new(),
        });
    }
    if labeled.is_empty() {
        return Err(Error::Empty("labeled set for semi-supervised training".into()));
    }
    if unlabeled.is_empty() {
        log::warn!("no unlabeled images; semi-supervised stage trains on labeled images only");
    }
    let eval = eval.filter(|e| !e.is_empty()).unwrap_or(labeled);
    let spe = if unlabeled.is_empty() {
        labeled.len().div_ceil(cfg.batch_size)
    } else {
        unlabeled.len().div_ceil(cfg.unlabeled_batch_size)
    };
    let sched = LrSchedule {
        warmup_init_lr: cfg.min_lr,
        base_lr: cfg.base_lr,
        min_lr: cfg.min_lr,
        warmup_steps: cfg.warmup_epochs * spe,
        total_steps: cfg.epochs * spe,
    };
    let mut opt = AdamW::new(&student, cfg.betas, cfg.weight_decay);
    let mut stream = LabeledStream::new(labeled.len(), rng::derive(seed, "labeled-order"));
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut u_order: Vec<usize> = (0..unlabeled.len()).collect();
        u_order.shuffle(&mut rng::rng(rng::derive_n(rng::derive(seed, "unlabeled-order"), epoch as u64)));
        let lr0 = sched.lr(step);
        let (mut total, mut accepted, mut seen) = (0.0, 0usize, 0usize);
        for b in 0..spe {
            let step_seed = rng::derive_n(rng::derive(seed, "step"), step as u64);
            let l_idx = stream.take(cfg.batch_size.min(labeled.len()));
            let l_batch: Vec<&ImageSample> = l_idx.iter().map(|&i| &labeled[i]).collect();
            let l_labels: Vec<usize> = l_idx.iter().map(|&i| labels[i]).collect();
            let l_views = views(&cfg.weak, &l_batch, rng::derive(step_seed, "labeled-weak"));
            let u_batch: Vec<&ImageSample> = u_order
                .iter()
                .skip(b * cfg.unlabeled_batch_size)
                .take(cfg.unlabeled_batch_size)
                .map(|&i| &unlabeled[i])
                .collect();
            let items = if u_batch.is_empty() || cfg.mu == 0.0 {
                plain_items(&l_views, &l_labels, classes, 1.0 / l_views.len() as f64)
            } else {
                let weak = views(&cfg.weak, &u_batch, rng::derive(step_seed, "unlabeled-weak"));
                let strong = views(&cfg.strong, &u_batch, rng::derive(step_seed, "unlabeled-strong"));
                let labeler = match cfg.mode {
                    SemiMode::EmaTeacher => &teacher,
                    SemiMode::Fixmatch => &student,
                };
                let pl = pseudo_label_views(labeler, &weak, cfg.tau)?;
                accepted += pl.accept_mask.iter().filter(|&&a| a).count();
                seen += u_batch.len();
                semisup_items(&l_views, &l_labels, &strong, &pl, cfg.mu, classes)
            };
            total += step_on_items(&mut student, &mut opt, &items, sched.lr(step), "semisup", epoch + 1)?;
            match cfg.mode {
                SemiMode::EmaTeacher => ema_update(&mut teacher, &student, cfg.momentum)?,
                SemiMode::Fixmatch => teacher.copy_from(&student)?,
            }
            step += 1;
        }
        let loss = total / spe as f64;
        let student_acc = accuracy(&student, eval)?;
        let teacher_acc = match cfg.mode {
            SemiMode::EmaTeacher => accuracy(&teacher, eval)?,
            SemiMode::Fixmatch => student_acc,
        };
        let accept_rate = if seen == 0 { 0.0 } else { accepted as f64 / seen as f64 };
        log::info!(
            "semisup epoch {} lr {lr0:.3e} loss {loss:.5} accept {accept_rate:.3} teacher {teacher_acc:.4} student {student_acc:.4}",
            epoch + 1
        );
        history.push(SemiSupEpoch {
            epoch: epoch + 1,
            lr: lr0,
            loss,
            accept_rate,
            teacher_acc,
            student_acc,
        });
    }
    Ok(SemiSupOutcome {
        student,
        teacher,
        mode: cfg.mode,
        history,
    })
}

pub fn write_history_csv(path: &Path, history: &[SemiSupEpoch]) -> Result<()> {
    let rows: Vec<Vec<String>> = history
        .iter()
        .map(|h| {
            vec![
                h.epoch.to_string(),
                num(h.lr),
                num(h.loss),
                num(h.accept_rate),
                num(h.teacher_acc),
                num(h.student_acc),
            ]
        })
        .collect();
    write_csv(
        path,
        &["epoch", "lr", "loss", "accept_rate", "teacher_acc", "student_acc"],
        &rows,
    )
}
