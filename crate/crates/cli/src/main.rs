use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ssfer_core::config::{load_config, DataSource, TrainConfig};
use ssfer_core::dataset::{save_manifest, synth_generate, LabelBudget, SynthSpec};
use ssfer_core::experiments::{hpo_study, run_experiment, Experiment, ExperimentOptions};
use ssfer_core::pipeline::{evaluate_checkpoint, run_pipeline, PipelineOptions, Stage, MANIFEST};
use ssfer_core::report::write_json;

#[derive(Parser)]
#[command(name = "ssfer", version, about = "Three-stage semi-supervised expression recognition on a small ViT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; the bundled desk config when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config's.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace existing results in the output directory.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    common: Common,
    /// Stage to skip (a, b or c); repeatable.
    #[arg(long = "skip-stage", value_name = "STAGE")]
    skip: Vec<Stage>,
    /// Starting weights instead of a fresh initialization.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// kfold, noise, attack, maskratio, hpo, semicompare or ablation.
    name: String,
    #[command(flatten)]
    common: Common,
    /// Number of seeds, counting up from the run seed.
    #[arg(long)]
    seeds: Option<u64>,
    /// Label budgets of the noise grid as fractions; repeatable.
    #[arg(long = "budget")]
    budgets: Vec<f64>,
}

#[derive(Args)]
struct HpoArgs {
    #[command(flatten)]
    common: Common,
    /// Epochs per candidate evaluation.
    #[arg(long, default_value_t = 5)]
    budget: usize,
    #[arg(long, default_value_t = 6)]
    wolves: usize,
    #[arg(long, default_value_t = 5)]
    iterations: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 500)]
    test: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0.3)]
    jitter: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Run pretraining, supervised and semi-supervised stages in order.
    Pipeline(PipelineArgs),
    /// Masked reconstruction pretraining only.
    Pretrain(StageArgs),
    /// Supervised fine-tuning only.
    Finetune(StageArgs),
    /// Semi-supervised fine-tuning only.
    Semisup(StageArgs),
    /// Test metrics of a checkpoint.
    Eval(StageArgs),
    /// Run a named experiment and write its CSV, JSON and PNG report.
    Experiment(ExperimentArgs),
    /// Search the supervised learning-rate triple and write the tuned config.
    Hpo(HpoArgs),
    /// Write a generated dataset as PNG manifests.
    Synth(SynthArgs),
}

fn load(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => load_config(p).with_context(|| format!("loading {}", p.display()))?,
        None => TrainConfig::desk(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pipeline(cfg: &TrainConfig, skip: BTreeSet<Stage>, checkpoint: Option<PathBuf>, overwrite: bool) -> Result<()> {
    let m = run_pipeline(
        cfg,
        &PipelineOptions {
            skip,
            overwrite,
            checkpoint,
        },
    )?;
    for s in &m.stages {
        log::info!("stage {} done in {:.1}s: {}", s.stage, s.seconds, s.checkpoint.display());
    }
    println!(
        "test accuracy {:.4}; manifest {}",
        m.final_eval.accuracy,
        cfg.output_dir.join(MANIFEST).display()
    );
    Ok(())
}

fn only(stage: Stage) -> BTreeSet<Stage> {
    Stage::ALL.into_iter().filter(|&s| s != stage).collect()
}

fn refuse_existing(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        bail!("{} exists; pass --overwrite to replace it", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pipeline(a) => {
            let cfg = load(&a.common)?;
            pipeline(&cfg, a.skip.into_iter().collect(), a.checkpoint, a.common.overwrite)
        }
        Command::Pretrain(a) => pipeline(&load(&a.common)?, only(Stage::A), a.checkpoint, a.common.overwrite),
        Command::Finetune(a) => pipeline(&load(&a.common)?, only(Stage::B), a.checkpoint, a.common.overwrite),
        Command::Semisup(a) => pipeline(&load(&a.common)?, only(Stage::C), a.checkpoint, a.common.overwrite),
        Command::Eval(a) => {
            let cfg = load(&a.common)?;
            let ckpt = a.checkpoint.context("eval needs --checkpoint")?;
            let out = cfg.output_dir.join("eval");
            refuse_existing(&out.join("metrics.json"), a.common.overwrite)?;
            let acc = evaluate_checkpoint(&cfg, &ckpt, &out)?;
            println!("test accuracy {acc:.4}; metrics in {}", out.display());
            Ok(())
        }
        Command::Experiment(a) => {
            let experiment: Experiment = a.name.parse()?;
            let cfg = load(&a.common)?;
            let mut opts = ExperimentOptions::for_config(&cfg);
            if let Some(n) = a.seeds {
                opts.seeds = (0..n).map(|i| cfg.seed + i).collect();
            }
            opts.budgets = a.budgets.into_iter().map(LabelBudget::Fraction).collect();
            let out = &cfg.output_dir;
            refuse_existing(&out.join(format!("{experiment}.json")), a.common.overwrite)?;
            let r = run_experiment(experiment, &cfg, &opts, out)?;
            println!("{}", r.table.header.join(","));
            for row in &r.table.rows {
                println!("{}", row.join(","));
            }
            println!("wrote {}", r.csv.display());
            Ok(())
        }
        Command::Hpo(a) => {
            let cfg = load(&a.common)?;
            let opts = ExperimentOptions {
                hpo_budget: a.budget,
                hpo_wolves: a.wolves,
                hpo_iterations: a.iterations,
                ..ExperimentOptions::for_config(&cfg)
            };
            let out = &cfg.output_dir;
            let tuned_path = out.join("tuned_config.json");
            refuse_existing(&tuned_path, a.common.overwrite)?;
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let (study, supervised) = hpo_study(&cfg, &opts, Some(&out.join("hpo_search.csv")))?;
            write_json(&tuned_path, &TrainConfig { supervised, ..cfg.clone() })?;
            let (b, m, w) = study.tuned_lrs;
            println!(
                "tuned lr {b:.3e} min {m:.3e} warmup-init {w:.3e}; validation {:.4} -> {:.4}; wrote {}",
                study.base_score,
                study.best_score,
                tuned_path.display()
            );
            Ok(())
        }
        Command::Synth(a) => {
            let spec = SynthSpec {
                n_samples: a.n + a.test,
                class_count: a.classes,
                image_size: a.size,
                jitter: a.jitter,
                seed: a.seed,
            };
            let all = synth_generate(&spec)?;
            let (train, test) = all.split_at(a.n);
            save_manifest(&a.out.join("train"), train)?;
            save_manifest(&a.out.join("test"), test)?;
            let mut cfg = TrainConfig::desk();
            cfg.model.image_size = a.size;
            cfg.model.class_count = a.classes;
            cfg.data.source = DataSource::Manifest {
                train: "train/manifest.json".into(),
                test: "test/manifest.json".into(),
            };
            cfg.output_dir = "runs/synth".into();
            std::fs::write(a.out.join("config.json"), cfg.to_json()?)
                .with_context(|| format!("writing {}", a.out.join("config.json").display()))?;
            println!("wrote {} train and {} test samples under {}", train.len(), test.len(), a.out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Ok(v) = std::env::var("SSFER_THREADS") {
        let threads = match v.parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => {
                eprintln!("error: SSFER_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(2);
            }
        };
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
