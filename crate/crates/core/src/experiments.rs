//! Experiment runners. Each writes `<name>.csv`, `<name>.json` and
//! `<name>.png` into the output directory.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::config::{load_data, TrainConfig};
use crate::dataset::{inject_label_noise, kfold_split, subsample_labels, BoxProvider, DatasetSplit, ImageSample, LabelBudget};
use crate::error::{Error, Result};
use crate::evalkit::{accuracy, attack_experiment, expression_focus_rate, AttackReport, InputGradientSaliency, SaliencyProvider, DEFAULT_EPSILONS};
use crate::hpo::write_search_log;
use crate::image::Image;
use crate::model::ModelState;
use crate::pipeline::{initial_state, prepare_split};
use crate::pretrain::{mask_ratio_study, pretrain_from, MaskRatioRow};
use crate::report::{image_grid, num, plot_lines, write_csv, write_json};
use crate::rng;
use crate::semisup::{run_semisup, SemiMode};
use crate::supervised::{run_supervised, MixMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Experiment {
    Kfold,
    Noise,
    Attack,
    MaskRatio,
    Hpo,
    SemiCompare,
    Ablation,
}

impl Experiment {
    pub const ALL: [Experiment; 7] = [
        Experiment::Kfold,
        Experiment::Noise,
        Experiment::Attack,
        Experiment::MaskRatio,
        Experiment::Hpo,
        Experiment::SemiCompare,
        Experiment::Ablation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Kfold => "kfold",
            Experiment::Noise => "noise",
            Experiment::Attack => "attack",
            Experiment::MaskRatio => "maskratio",
            Experiment::Hpo => "hpo",
            Experiment::SemiCompare => "semicompare",
            Experiment::Ablation => "ablation",
        }
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownExperiment {
                name: s.to_string(),
                available: Experiment::ALL.map(Experiment::name).join(", "),
            })
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOptions {
    pub seeds: Vec<u64>,
    pub folds: usize,
    pub noise_ratios: Vec<f64>,
    /// Label budgets of the noise grid; empty means the config's budget.
    pub budgets: Vec<LabelBudget>,
    pub epsilons: Vec<f64>,
    pub mask_ratios: Vec<f64>,
    /// Test images scored per mask ratio.
    pub mask_eval: usize,
    pub hpo_budget: usize,
    pub hpo_wolves: usize,
    pub hpo_iterations: usize,
    /// Unlabeled images held out, with their labels restored, to score
    /// search candidates.
    pub hpo_validation: usize,
}

impl ExperimentOptions {
    pub fn for_config(cfg: &TrainConfig) -> Self {
        Self {
            seeds: (0..5).map(|i| cfg.seed + i).collect(),
            folds: 5,
            noise_ratios: vec![0.0, 0.1, 0.2, 0.3],
            budgets: Vec::new(),
            epsilons: DEFAULT_EPSILONS.to_vec(),
            mask_ratios: vec![0.5, 0.75, 0.9],
            mask_eval: 100,
            hpo_budget: 5,
            hpo_wolves: 6,
            hpo_iterations: 5,
            hpo_validation: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub experiment: Experiment,
    pub table: Table,
    pub csv: PathBuf,
    pub json: PathBuf,
    pub png: PathBuf,
    /// Additional files such as search logs or image grids.
    pub extra: Vec<PathBuf>,
}

#[derive(Serialize)]
struct Payload<'a, T: Serialize> {
    experiment: &'a str,
    table: &'a Table,
    details: T,
}

fn emit<T: Serialize>(
    out: &Path,
    experiment: Experiment,
    table: Table,
    details: T,
    series: &[Vec<(f64, f64)>],
    extra: Vec<PathBuf>,
) -> Result<ExperimentReport> {
    let name = experiment.name();
    let csv = out.join(format!("{name}.csv"));
    let json = out.join(format!("{name}.json"));
    let png = out.join(format!("{name}.png"));
    let header: Vec<&str> = table.header.iter().map(String::as_str).collect();
    write_csv(&csv, &header, &table.rows)?;
    write_json(
        &json,
        &Payload {
            experiment: name,
            table: &table,
            details,
        },
    )?;
    plot_lines(&png, series)?;
    Ok(ExperimentReport {
        experiment,
        table,
        csv,
        json,
        png,
        extra,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn with_seed(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..cfg.clone() }
}

/// Stage (a) on every training image of `split`.
pub fn pretrain_stage(cfg: &TrainConfig, split: &DatasetSplit) -> Result<ModelState> {
    let state = initial_state(cfg, None)?;
    let images: Vec<&Image> = split.labeled.iter().chain(&split.unlabeled).map(|s| &s.image).collect();
    Ok(pretrain_from(&cfg.pretrain, state, &images, rng::derive(cfg.seed, "pretrain"))?.state)
}

/// Stage (b) in the given mode; returns the final weights.
pub fn supervised_stage(
    cfg: &TrainConfig,
    state: ModelState,
    split: &DatasetSplit,
    boxes: &BoxProvider,
    mode: MixMode,
) -> Result<ModelState> {
    let sc = crate::supervised::SupervisedConfig {
        mode,
        ..cfg.supervised.clone()
    };
    Ok(run_supervised(&sc, state, &split.labeled, None, boxes, rng::derive(cfg.seed, "supervised"))?.state)
}

/// Stage (c) in the given mode; returns the model used for prediction.
pub fn semisup_stage(cfg: &TrainConfig, state: ModelState, split: &DatasetSplit, mode: SemiMode) -> Result<ModelState> {
    let sc = crate::semisup::SemiSupConfig {
        mode,
        ..cfg.semisup.clone()
    };
    let out = run_semisup(&sc, state, &split.labeled, &split.unlabeled, None, rng::derive(cfg.seed, "semisup"))?;
    Ok(out.model().clone())
}

/// Pretraining, FaceMix fine-tuning and EMA-teacher training.
fn full_chain(cfg: &TrainConfig, split: &DatasetSplit, boxes: &BoxProvider, pretrained: Option<ModelState>) -> Result<ModelState> {
    let p = match pretrained {
        Some(p) => p,
        None => pretrain_stage(cfg, split)?,
    };
    let b = supervised_stage(cfg, p, split, boxes, MixMode::Facemix)?;
    semisup_stage(cfg, b, split, SemiMode::EmaTeacher)
}

/// Test accuracies of every component combination for one seed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedStudy {
    pub seed: u64,
    /// Pretraining and plain supervised fine-tuning.
    pub baseline: f64,
    pub facemix: f64,
    /// EMA-teacher on top of the baseline.
    pub ema: f64,
    /// FaceMix followed by EMA-teacher: the full pipeline.
    pub both: f64,
    /// FixMatch on top of FaceMix.
    pub fixmatch: f64,
}

pub fn seed_study(cfg: &TrainConfig, seed: u64) -> Result<SeedStudy> {
    let cfg = with_seed(cfg, seed);
    let split = prepare_split(&cfg)?;
    let boxes = cfg.data.boxes.provider()?;
    let p = pretrain_stage(&cfg, &split)?;
    let b_plain = supervised_stage(&cfg, p.clone(), &split, &boxes, MixMode::Plain)?;
    let b_fm = supervised_stage(&cfg, p, &split, &boxes, MixMode::Facemix)?;
    let acc = |m: &ModelState| accuracy(m, &split.test);
    let baseline = acc(&b_plain)?;
    let facemix = acc(&b_fm)?;
    let ema = acc(&semisup_stage(&cfg, b_plain, &split, SemiMode::EmaTeacher)?)?;
    let both = acc(&semisup_stage(&cfg, b_fm.clone(), &split, SemiMode::EmaTeacher)?)?;
    let fixmatch = acc(&semisup_stage(&cfg, b_fm, &split, SemiMode::Fixmatch)?)?;
    log::info!("seed {seed}: baseline {baseline:.4} facemix {facemix:.4} ema {ema:.4} both {both:.4} fixmatch {fixmatch:.4}");
    Ok(SeedStudy {
        seed,
        baseline,
        facemix,
        ema,
        both,
        fixmatch,
    })
}

fn seed_header<'a>(lead: &[&'a str], seeds: &'a [String]) -> Vec<&'a str> {
    lead.iter().copied().chain(seeds.iter().map(String::as_str)).collect()
}

/// The four-row component grid from per-seed studies.
pub fn ablation_table(studies: &[SeedStudy]) -> Table {
    let seeds: Vec<String> = studies.iter().map(|s| format!("seed_{}", s.seed)).collect();
    let mut t = Table::new(&seed_header(&["setting", "facemix", "ema_teacher", "mean_acc"], &seeds));
    let rows: [(&str, bool, bool, fn(&SeedStudy) -> f64); 4] = [
        ("baseline", false, false, |s| s.baseline),
        ("+facemix", true, false, |s| s.facemix),
        ("+ema", false, true, |s| s.ema),
        ("+both", true, true, |s| s.both),
    ];
    for (name, fm, ema, get) in rows {
        let accs: Vec<f64> = studies.iter().map(get).collect();
        let mut row = vec![name.to_string(), fm.to_string(), ema.to_string(), num(mean(&accs))];
        row.extend(accs.iter().map(|&a| num(a)));
        t.push(row);
    }
    t
}

pub fn semicompare_table(studies: &[SeedStudy]) -> Table {
    let seeds: Vec<String> = studies.iter().map(|s| format!("seed_{}", s.seed)).collect();
    let mut t = Table::new(&seed_header(&["method", "mean_acc"], &seeds));
    let rows: [(&str, fn(&SeedStudy) -> f64); 2] = [("ema_teacher", |s| s.both), ("fixmatch", |s| s.fixmatch)];
    for (name, get) in rows {
        let accs: Vec<f64> = studies.iter().map(get).collect();
        let mut row = vec![name.to_string(), num(mean(&accs))];
        row.extend(accs.iter().map(|&a| num(a)));
        t.push(row);
    }
    t
}

fn studies(cfg: &TrainConfig, opts: &ExperimentOptions) -> Result<Vec<SeedStudy>> {
    if opts.seeds.is_empty() {
        return Err(Error::Config("experiment needs at least one seed".into()));
    }
    opts.seeds.iter().map(|&s| seed_study(cfg, s)).collect()
}

fn series_by_seed(studies: &[SeedStudy], fields: &[fn(&SeedStudy) -> f64]) -> Vec<Vec<(f64, f64)>> {
    fields
        .iter()
        .map(|f| studies.iter().enumerate().map(|(i, s)| (i as f64, f(s))).collect())
        .collect()
}

/// Fold accuracies of the full chain and their average.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KfoldResult {
    pub folds: Vec<f64>,
    pub average: f64,
}

pub fn kfold(cfg: &TrainConfig, k: usize) -> Result<KfoldResult> {
    let (train, _) = load_data(&cfg.data)?;
    let boxes = cfg.data.boxes.provider()?;
    let classes = cfg.model.class_count;
    let mut folds = Vec::with_capacity(k);
    for (i, (tr, val)) in kfold_split(&train, k, rng::derive(cfg.seed, "kfold"))?.into_iter().enumerate() {
        let fold_cfg = with_seed(cfg, rng::derive_n(cfg.seed, i as u64));
        let split = subsample_labels(&tr, classes, cfg.data.budget, rng::derive(fold_cfg.seed, "labels"))?;
        let split = inject_label_noise(&split, cfg.data.noise_ratio, rng::derive(fold_cfg.seed, "noise"))?;
        let model = full_chain(&fold_cfg, &split, &boxes, None)?;
        let acc = accuracy(&model, &val)?;
        log::info!("fold {}: {acc:.4}", i + 1);
        folds.push(acc);
    }
    let average = mean(&folds);
    Ok(KfoldResult { folds, average })
}

/// Mean accuracy over seeds per label budget and noise ratio.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseRow {
    pub budget: LabelBudget,
    pub accuracies: Vec<f64>,
    /// Accuracy at the first ratio minus accuracy at the last.
    pub decline: f64,
}

pub fn noise_grid(cfg: &TrainConfig, ratios: &[f64], budgets: &[LabelBudget], seeds: &[u64]) -> Result<Vec<NoiseRow>> {
    if ratios.is_empty() || seeds.is_empty() {
        return Err(Error::Config("noise grid needs ratios and seeds".into()));
    }
    let boxes = cfg.data.boxes.provider()?;
    let budgets = if budgets.is_empty() { vec![cfg.data.budget] } else { budgets.to_vec() };
    let mut sums = vec![vec![0.0; ratios.len()]; budgets.len()];
    for &seed in seeds {
        let mut base = with_seed(cfg, seed);
        base.data.noise_ratio = 0.0;
        let mut pretrained = None;
        for (bi, &budget) in budgets.iter().enumerate() {
            let mut c = base.clone();
            c.data.budget = budget;
            let clean = prepare_split(&c)?;
            // Pretraining sees every training image regardless of the budget.
            let p = match &pretrained {
                Some(p) => p,
                None => pretrained.insert(pretrain_stage(&c, &clean)?),
            };
            for (ri, &ratio) in ratios.iter().enumerate() {
                let split = inject_label_noise(&clean, ratio, rng::derive(seed, "noise"))?;
                let model = full_chain(&c, &split, &boxes, Some(p.clone()))?;
                let acc = accuracy(&model, &split.test)?;
                log::info!("seed {seed} budget {budget:?} noise {ratio}: {acc:.4}");
                sums[bi][ri] += acc;
            }
        }
    }
    Ok(budgets
        .into_iter()
        .zip(sums)
        .map(|(budget, s)| {
            let accuracies: Vec<f64> = s.iter().map(|v| v / seeds.len() as f64).collect();
            let decline = accuracies[0] - accuracies[accuracies.len() - 1];
            NoiseRow {
                budget,
                accuracies,
                decline,
            }
        })
        .collect())
}

fn budget_label(b: LabelBudget) -> String {
    match b {
        LabelBudget::PerClass(k) => format!("{k}_per_class"),
        LabelBudget::Fraction(f) => format!("{}%", num(100.0 * f)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackStudy {
    pub report: AttackReport,
    /// Fraction of focused pixels inside the eye and mouth regions.
    pub expression_focus_rate: Option<f64>,
}

pub fn attack_study(cfg: &TrainConfig, epsilons: &[f64]) -> Result<AttackStudy> {
    let split = prepare_split(cfg)?;
    let boxes = cfg.data.boxes.provider()?;
    let model = full_chain(cfg, &split, &boxes, None)?;
    let provider = InputGradientSaliency::default();
    let report = attack_experiment(&model, &split.test, epsilons, &provider)?;
    let maps = provider.saliency(&model, &split.test)?;
    Ok(AttackStudy {
        report,
        expression_focus_rate: expression_focus_rate(&maps, &split.test),
    })
}

/// Validation samples drawn from the unlabeled pool with their original
/// labels, and the rest of the pool.
fn hold_out(split: &DatasetSplit, train: &[ImageSample], n: usize) -> Result<(Vec<ImageSample>, Vec<ImageSample>)> {
    let labels: HashMap<&str, Option<usize>> = train.iter().map(|s| (s.id.as_str(), s.label)).collect();
    let n = n.min(split.unlabeled.len());
    if n == 0 {
        return Err(Error::Empty("unlabeled pool for the search's validation split".into()));
    }
    let val = split.unlabeled[..n]
        .iter()
        .map(|s| ImageSample {
            label: labels.get(s.id.as_str()).copied().flatten(),
            ..s.clone()
        })
        .collect();
    Ok((val, split.unlabeled[n..].to_vec()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HpoStudy {
    /// (base, min, warmup-init) learning rates.
    pub base_lrs: (f64, f64, f64),
    pub tuned_lrs: (f64, f64, f64),
    pub base_score: f64,
    pub best_score: f64,
    pub test_base: f64,
    pub test_tuned: f64,
}

pub fn hpo_study(cfg: &TrainConfig, opts: &ExperimentOptions, log_path: Option<&Path>) -> Result<(HpoStudy, crate::supervised::SupervisedConfig)> {
    let (train, _) = load_data(&cfg.data)?;
    let split = prepare_split(cfg)?;
    let (val, rest) = hold_out(&split, &train, opts.hpo_validation)?;
    let split = DatasetSplit { unlabeled: rest, ..split };
    let boxes = cfg.data.boxes.provider()?;
    let p = pretrain_stage(cfg, &split)?;
    let sup_seed = rng::derive(cfg.seed, "supervised");
    let proxy = |c: &crate::supervised::SupervisedConfig| -> Result<f64> {
        let out = run_supervised(c, p.clone(), &split.labeled, None, &boxes, sup_seed)?;
        accuracy(&out.state, &val)
    };
    let res = crate::hpo::lr_search(
        &cfg.supervised,
        opts.hpo_budget,
        opts.hpo_wolves,
        opts.hpo_iterations,
        rng::derive(cfg.seed, "hpo"),
        proxy,
    )?;
    if let (Some(path), Some(r)) = (log_path, &res.result) {
        write_search_log(path, r)?;
    }
    let test_of = |c: &crate::supervised::SupervisedConfig| -> Result<f64> {
        let out = run_supervised(c, p.clone(), &split.labeled, None, &boxes, sup_seed)?;
        accuracy(&out.state, &split.test)
    };
    let triple = |c: &crate::supervised::SupervisedConfig| (c.base_lr, c.min_lr, c.warmup_init_lr);
    let study = HpoStudy {
        base_lrs: triple(&cfg.supervised),
        tuned_lrs: triple(&res.config),
        base_score: res.base_score,
        best_score: res.best_score,
        test_base: test_of(&cfg.supervised)?,
        test_tuned: test_of(&res.config)?,
    };
    Ok((study, res.config))
}

/// Runs `experiment` and writes its report files under `out`.
pub fn run_experiment(experiment: Experiment, cfg: &TrainConfig, opts: &ExperimentOptions, out: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    match experiment {
        Experiment::Ablation => {
            let s = studies(cfg, opts)?;
            let series = series_by_seed(&s, &[|s| s.baseline, |s| s.facemix, |s| s.ema, |s| s.both]);
            emit(out, experiment, ablation_table(&s), &s, &series, Vec::new())
        }
        Experiment::SemiCompare => {
            let s = studies(cfg, opts)?;
            let series = series_by_seed(&s, &[|s| s.both, |s| s.fixmatch]);
            emit(out, experiment, semicompare_table(&s), &s, &series, Vec::new())
        }
        Experiment::Kfold => {
            let r = kfold(cfg, opts.folds)?;
            let names: Vec<String> = (1..=r.folds.len()).map(|i| format!("fold_{i}")).collect();
            let mut header: Vec<&str> = names.iter().map(String::as_str).collect();
            header.push("average");
            let mut t = Table::new(&header);
            t.push(r.folds.iter().chain([&r.average]).map(|&a| num(a)).collect());
            let series = vec![r.folds.iter().enumerate().map(|(i, &a)| ((i + 1) as f64, a)).collect()];
            emit(out, experiment, t, &r, &series, Vec::new())
        }
        Experiment::Noise => {
            let rows = noise_grid(cfg, &opts.noise_ratios, &opts.budgets, &opts.seeds)?;
            let names: Vec<String> = opts.noise_ratios.iter().map(|r| format!("noise_{}", num(100.0 * r))).collect();
            let mut header = vec!["budget"];
            header.extend(names.iter().map(String::as_str));
            header.push("decline");
            let mut t = Table::new(&header);
            for r in &rows {
                let mut row = vec![budget_label(r.budget)];
                row.extend(r.accuracies.iter().map(|&a| num(a)));
                row.push(num(r.decline));
                t.push(row);
            }
            let series: Vec<Vec<(f64, f64)>> = rows
                .iter()
                .map(|r| opts.noise_ratios.iter().zip(&r.accuracies).map(|(&x, &y)| (x, y)).collect())
                .collect();
            emit(out, experiment, t, &rows, &series, Vec::new())
        }
        Experiment::Attack => {
            let a = attack_study(cfg, &opts.epsilons)?;
            let mut t = Table::new(&["epsilon", "focused_acc", "unfocused_acc"]);
            for r in &a.report.rows {
                t.push(vec![num(r.epsilon), num(r.focused_acc), num(r.unfocused_acc)]);
            }
            let rows = &a.report.rows;
            let series = vec![
                rows.iter().map(|r| (r.epsilon, r.focused_acc)).collect(),
                rows.iter().map(|r| (r.epsilon, r.unfocused_acc)).collect(),
            ];
            emit(out, experiment, t, &a, &series, Vec::new())
        }
        Experiment::MaskRatio => {
            let (train, test) = load_data(&cfg.data)?;
            let images: Vec<&Image> = train.iter().map(|s| &s.image).collect();
            let eval = &test[..opts.mask_eval.min(test.len())];
            let report = mask_ratio_study(
                &opts.mask_ratios,
                &cfg.pretrain,
                &cfg.model,
                &images,
                eval,
                4,
                rng::derive(cfg.seed, "pretrain"),
            )?;
            let grid = out.join("maskratio_grid.png");
            let rows: Vec<Vec<Image>> = report.grids.iter().map(|g| g.iter().flatten().cloned().collect()).collect();
            image_grid(&grid, &rows, 2)?;
            let mut t = Table::new(&["mask_ratio", "final_train_loss", "masked_mse", "expression_mse"]);
            for r in &report.rows {
                t.push(vec![num(r.ratio), num(r.final_train_loss), num(r.masked_mse), num(r.expression_mse)]);
            }
            let pick = |f: fn(&MaskRatioRow) -> f64| report.rows.iter().map(|r| (r.ratio, f(r))).collect();
            let series = vec![pick(|r| r.masked_mse), pick(|r| r.expression_mse)];
            emit(out, experiment, t, &report.rows, &series, vec![grid])
        }
        Experiment::Hpo => {
            let log_path = out.join("hpo_search.csv");
            let (study, _) = hpo_study(cfg, opts, Some(&log_path))?;
            let mut t = Table::new(&["config", "base_lr", "min_lr", "warmup_init_lr", "val_acc", "test_acc"]);
            for (name, (a, b, c), v, te) in [
                ("base", study.base_lrs, study.base_score, study.test_base),
                ("tuned", study.tuned_lrs, study.best_score, study.test_tuned),
            ] {
                t.push(vec![name.to_string(), num(a), num(b), num(c), num(v), num(te)]);
            }
            let series = vec![vec![(0.0, study.base_score), (1.0, study.best_score)]];
            let extra = if log_path.exists() { vec![log_path] } else { Vec::new() };
            emit(out, experiment, t, &study, &series, extra)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataSource;
    use crate::dataset::SynthSpec;

    fn quick() -> TrainConfig {
        let mut c = TrainConfig::desk();
        c.data.source = DataSource::Synth {
            spec: SynthSpec {
                n_samples: 60,
                ..SynthSpec::default()
            },
            test_samples: 12,
        };
        c.data.budget = LabelBudget::Fraction(0.3);
        c.pretrain.epochs = 1;
        c.pretrain.warmup_epochs = 0;
        c.supervised.epochs = 1;
        c.supervised.warmup_epochs = 0;
        c.supervised.small_label_factor = 1;
        c.semisup.epochs = 1;
        c.semisup.warmup_epochs = 0;
        c
    }

    fn opts(c: &TrainConfig) -> ExperimentOptions {
        ExperimentOptions {
            seeds: vec![0, 1],
            folds: 2,
            mask_ratios: vec![0.75, 0.9],
            mask_eval: 4,
            hpo_budget: 1,
            hpo_wolves: 4,
            hpo_iterations: 1,
            hpo_validation: 10,
            ..ExperimentOptions::for_config(c)
        }
    }

    #[test]
    fn unknown_name_lists_available() {
        let err = "bogus".parse::<Experiment>().unwrap_err().to_string();
        for e in Experiment::ALL {
            assert!(err.contains(e.name()), "{err}");
        }
        assert_eq!("KFold".parse::<Experiment>().unwrap(), Experiment::Kfold);
    }

    #[test]
    fn every_experiment_writes_its_files() {
        let c = quick();
        let o = opts(&c);
        let dir = tempfile::tempdir().unwrap();
        for e in Experiment::ALL {
            let r = run_experiment(e, &c, &o, dir.path()).unwrap();
            for p in [&r.csv, &r.json, &r.png].into_iter().chain(&r.extra) {
                assert!(p.exists(), "{e}: {}", p.display());
            }
            assert!(r.table.rows.iter().all(|row| row.len() == r.table.header.len()), "{e}");
            match e {
                Experiment::Ablation => {
                    let names: Vec<&str> = r.table.rows.iter().map(|r| r[0].as_str()).collect();
                    assert_eq!(names, ["baseline", "+facemix", "+ema", "+both"]);
                }
                Experiment::Kfold => assert_eq!(r.table.header.len(), 3),
                Experiment::Noise => {
                    assert_eq!(r.table.header.last().unwrap(), "decline");
                    assert_eq!(r.table.header[1..5], ["noise_0", "noise_10", "noise_20", "noise_30"]);
                }
                Experiment::Attack => assert_eq!(r.table.rows.len(), DEFAULT_EPSILONS.len()),
                Experiment::MaskRatio => assert_eq!(r.table.rows.len(), 2),
                Experiment::Hpo | Experiment::SemiCompare => assert_eq!(r.table.rows.len(), 2),
            }
        }
    }

    #[test]
    fn held_out_validation_restores_labels() {
        let c = quick();
        let (train, _) = load_data(&c.data).unwrap();
        let split = prepare_split(&c).unwrap();
        let (val, rest) = hold_out(&split, &train, 5).unwrap();
        assert_eq!(val.len(), 5);
        assert_eq!(rest.len() + 5, split.unlabeled.len());
        for v in &val {
            let orig = train.iter().find(|t| t.id == v.id).unwrap();
            assert_eq!(v.label, orig.label);
        }
    }
}
