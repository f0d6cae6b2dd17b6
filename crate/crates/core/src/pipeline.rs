//! The three-stage driver: pretraining, supervised fine-tuning and
//! semi-supervised fine-tuning, chained through on-disk checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{ensure_compatible, load_checkpoint, save_checkpoint};
use crate::config::{load_data, TrainConfig};
use crate::dataset::{inject_label_noise, subsample_labels, DatasetSplit};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, write_metrics};
use crate::image::Image;
use crate::model::ModelState;
use crate::pretrain::{pretrain_from, write_loss_csv};
use crate::report::write_json;
use crate::rng;
use crate::semisup::{run_semisup, write_history_csv as write_semisup_csv};
use crate::supervised::{run_supervised, write_history_csv as write_supervised_csv};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    /// Masked reconstruction pretraining.
    A,
    /// Supervised fine-tuning.
    B,
    /// Semi-supervised fine-tuning.
    C,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::A, Stage::B, Stage::C];

    pub fn name(self) -> &'static str {
        match self {
            Stage::A => "pretrain",
            Stage::B => "supervised",
            Stage::C => "semisup",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" | "pretrain" => Ok(Stage::A),
            "b" | "supervised" | "finetune" => Ok(Stage::B),
            "c" | "semisup" => Ok(Stage::C),
            _ => Err(Error::Config(format!("unknown stage {s:?}; expected a, b or c"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, Default)]
pub struct PipelineOptions {
    pub skip: BTreeSet<Stage>,
    pub overwrite: bool,
    /// Starting weights instead of a fresh initialization.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: Stage,
    pub checkpoint: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_checkpoint: Option<PathBuf>,
    pub history_csv: PathBuf,
    pub metrics: BTreeMap<String, f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalEval {
    /// Stage whose model was evaluated; `None` for the initial weights.
    pub stage: Option<Stage>,
    pub accuracy: f64,
    pub metrics_json: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub seed: u64,
    pub stages: Vec<StageOutcome>,
    pub final_eval: FinalEval,
    pub artifacts: Vec<PathBuf>,
    pub wall_clock_seconds: f64,
    pub code_version: String,
}

/// Labeled, unlabeled and test samples for `cfg` after the label budget
/// and label noise are applied.
pub fn prepare_split(cfg: &TrainConfig) -> Result<DatasetSplit> {
    let (train, test) = load_data(&cfg.data)?;
    let split = subsample_labels(&train, cfg.model.class_count, cfg.data.budget, rng::derive(cfg.seed, "labels"))?;
    let split = inject_label_noise(&split, cfg.data.noise_ratio, rng::derive(cfg.seed, "noise"))?.with_test(test);
    split.validate()?;
    Ok(split)
}

pub fn initial_state(cfg: &TrainConfig, checkpoint: Option<&Path>) -> Result<ModelState> {
    match checkpoint {
        Some(p) => {
            let (state, meta) = load_checkpoint(p)?;
            ensure_compatible(&meta, &cfg.model)?;
            Ok(state)
        }
        None => ModelState::new(&cfg.model, rng::derive(cfg.seed, "init")),
    }
}

fn metrics(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Saves `state` and reads it back, so the next stage starts from exactly
/// what a separate invocation would load.
fn persist(path: &Path, state: &ModelState, stage: Stage, epoch: usize, m: BTreeMap<String, f64>) -> Result<ModelState> {
    save_checkpoint(path, state, stage.name(), epoch, m)?;
    Ok(load_checkpoint(path)?.0)
}

fn blob_of(path: &Path) -> PathBuf {
    path.with_extension("bin")
}

/// Runs the stages not in `opts.skip`, in order, writing checkpoints, CSV
/// histories, test metrics and `manifest.json` under `cfg.output_dir`.
pub fn run_pipeline(cfg: &TrainConfig, opts: &PipelineOptions) -> Result<RunManifest> {
    cfg.validate()?;
    let started = Instant::now();
    let out = &cfg.output_dir;
    let manifest_path = out.join(MANIFEST);
    if manifest_path.exists() && !opts.overwrite {
        return Err(Error::OutputExists(out.clone()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let split = prepare_split(cfg)?;
    let boxes = cfg.data.boxes.provider()?;
    let mut state = initial_state(cfg, opts.checkpoint.as_deref())?;
    let mut stages = Vec::new();
    let mut artifacts = Vec::new();
    let mut last = None;

    if !opts.skip.contains(&Stage::A) {
        let t = Instant::now();
        let images: Vec<&Image> = split.labeled.iter().chain(&split.unlabeled).map(|s| &s.image).collect();
        let res = pretrain_from(&cfg.pretrain, state, &images, rng::derive(cfg.seed, "pretrain"))?;
        let ckpt = out.join("pretrain.json");
        let csv = out.join("pretrain_loss.csv");
        write_loss_csv(&csv, &res.history)?;
        let loss = res.history.last().map_or(f64::NAN, |h| h.loss);
        let m = metrics(&[("final_loss", loss)]);
        state = persist(&ckpt, &res.state, Stage::A, res.history.len(), m.clone())?;
        artifacts.extend([ckpt.clone(), blob_of(&ckpt), csv.clone()]);
        stages.push(StageOutcome {
            stage: Stage::A,
            checkpoint: ckpt,
            best_checkpoint: None,
            history_csv: csv,
            metrics: m,
            seconds: t.elapsed().as_secs_f64(),
        });
        last = Some(Stage::A);
    }

    if !opts.skip.contains(&Stage::B) {
        let t = Instant::now();
        let res = run_supervised(
            &cfg.supervised,
            state,
            &split.labeled,
            Some(&split.test),
            &boxes,
            rng::derive(cfg.seed, "supervised"),
        )?;
        let ckpt = out.join("supervised.json");
        let best = out.join("supervised_best.json");
        let csv = out.join("supervised_history.csv");
        write_supervised_csv(&csv, &res.history)?;
        let final_acc = res.history.last().map_or(f64::NAN, |h| h.eval_acc);
        save_checkpoint(&best, &res.best, "supervised-best", res.best_epoch, metrics(&[("eval_acc", res.best_acc)]))?;
        let m = metrics(&[("eval_acc", final_acc), ("best_eval_acc", res.best_acc)]);
        state = persist(&ckpt, &res.state, Stage::B, res.history.len(), m.clone())?;
        artifacts.extend([ckpt.clone(), blob_of(&ckpt), best.clone(), blob_of(&best), csv.clone()]);
        stages.push(StageOutcome {
            stage: Stage::B,
            checkpoint: ckpt,
            best_checkpoint: Some(best),
            history_csv: csv,
            metrics: m,
            seconds: t.elapsed().as_secs_f64(),
        });
        last = Some(Stage::B);
    }

    if !opts.skip.contains(&Stage::C) {
        let t = Instant::now();
        let res = run_semisup(
            &cfg.semisup,
            state,
            &split.labeled,
            &split.unlabeled,
            Some(&split.test),
            rng::derive(cfg.seed, "semisup"),
        )?;
        let ckpt = out.join("semisup.json");
        let student = out.join("semisup_student.json");
        let csv = out.join("semisup_history.csv");
        write_semisup_csv(&csv, &res.history)?;
        let h = res.history.last();
        let m = metrics(&[
            ("accept_rate", h.map_or(f64::NAN, |h| h.accept_rate)),
            ("teacher_acc", h.map_or(f64::NAN, |h| h.teacher_acc)),
            ("student_acc", h.map_or(f64::NAN, |h| h.student_acc)),
        ]);
        save_checkpoint(&student, &res.student, "semisup-student", res.history.len(), m.clone())?;
        state = persist(&ckpt, res.model(), Stage::C, res.history.len(), m.clone())?;
        artifacts.extend([ckpt.clone(), blob_of(&ckpt), student.clone(), blob_of(&student), csv.clone()]);
        stages.push(StageOutcome {
            stage: Stage::C,
            checkpoint: ckpt,
            best_checkpoint: None,
            history_csv: csv,
            metrics: m,
            seconds: t.elapsed().as_secs_f64(),
        });
        last = Some(Stage::C);
    }

    let eval_dir = out.join("eval");
    let report = evaluate(&state, &split.test)?;
    write_metrics(&eval_dir, &report)?;
    let metrics_json = eval_dir.join("metrics.json");
    artifacts.extend([metrics_json.clone(), eval_dir.join("confusion.csv"), eval_dir.join("confusion.png")]);
    let manifest = RunManifest {
        config: cfg.clone(),
        seed: cfg.seed,
        stages,
        final_eval: FinalEval {
            stage: last,
            accuracy: report.accuracy,
            metrics_json,
        },
        artifacts,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    write_json(&manifest_path, &manifest)?;
    Ok(manifest)
}

/// Test accuracy of a checkpoint, with metrics written under `out`.
pub fn evaluate_checkpoint(cfg: &TrainConfig, checkpoint: &Path, out: &Path) -> Result<f64> {
    let state = initial_state(cfg, Some(checkpoint))?;
    let split = prepare_split(cfg)?;
    let report = evaluate(&state, &split.test)?;
    write_metrics(out, &report)?;
    Ok(report.accuracy)
}
