//! Grey Wolf Optimization and the learning-rate triple search built on it.

use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::{num, write_csv};
use crate::rng;
use crate::supervised::SupervisedConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GwoConfig {
    pub wolves: usize,
    /// Iteration 0 evaluates the initial pack; later iterations move it.
    pub iterations: usize,
    pub bounds: Vec<(f64, f64)>,
    pub seed: u64,
}

impl GwoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.wolves < 4 {
            return Err(Error::Config(format!("GWO needs at least 4 wolves, got {}", self.wolves)));
        }
        if self.iterations == 0 || self.bounds.is_empty() {
            return Err(Error::Config("GWO needs iterations >= 1 and at least one dimension".into()));
        }
        if let Some((lo, hi)) = self.bounds.iter().find(|(lo, hi)| !(lo < hi)) {
            return Err(Error::Config(format!("GWO bound ({lo}, {hi}) is empty")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best_position: Vec<f64>,
    pub best_fitness: f64,
    /// Leader fitness after each iteration.
    pub history: Vec<f64>,
    /// Leader position after each iteration.
    pub positions: Vec<Vec<f64>>,
}

/// Linear control scalar: 2 at iteration 0, 0 at the last one.
pub fn control_a(t: usize, iterations: usize) -> f64 {
    if iterations <= 1 {
        return 2.0;
    }
    2.0 - 2.0 * t as f64 / (iterations - 1) as f64
}

fn fitness_of<F: Fn(&[f64]) -> f64 + Sync>(objective: &F, pack: &[Vec<f64>]) -> Vec<f64> {
    pack.par_iter()
        .map(|x| {
            let f = objective(x);
            if f.is_nan() {
                log::warn!("objective returned NaN at {x:?}; treating as +inf");
                f64::INFINITY
            } else {
                f
            }
        })
        .collect()
}

#[derive(Clone)]
struct Leader {
    pos: Vec<f64>,
    fit: f64,
}

fn update_leaders(leaders: &mut Vec<Leader>, pack: &[Vec<f64>], fit: &[f64]) {
    let mut all: Vec<Leader> = leaders.drain(..).collect();
    all.extend(pack.iter().zip(fit).map(|(p, &f)| Leader { pos: p.clone(), fit: f }));
    all.sort_by(|a, b| a.fit.total_cmp(&b.fit));
    all.truncate(3);
    *leaders = all;
}

/// Minimizes `objective` over the box.
pub fn gwo_optimize<F>(objective: F, cfg: &GwoConfig) -> Result<SearchResult>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    gwo_optimize_seeded(objective, cfg, &[])
}

/// As [`gwo_optimize`], with the first wolves placed at `initial`
/// (clamped to the box) instead of uniformly at random.
pub fn gwo_optimize_seeded<F>(objective: F, cfg: &GwoConfig, initial: &[Vec<f64>]) -> Result<SearchResult>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    cfg.validate()?;
    let d = cfg.bounds.len();
    if initial.iter().any(|p| p.len() != d) || initial.len() > cfg.wolves {
        return Err(Error::Shape(format!("initial positions must be at most {} wolves of {d} dims", cfg.wolves)));
    }
    let clamp = |x: &mut Vec<f64>| {
        for (v, (lo, hi)) in x.iter_mut().zip(&cfg.bounds) {
            *v = v.clamp(*lo, *hi);
        }
    };
    let mut r = rng::rng(rng::derive(cfg.seed, "gwo"));
    let mut pack: Vec<Vec<f64>> = (0..cfg.wolves)
        .map(|w| {
            let mut x: Vec<f64> = match initial.get(w) {
                Some(p) => p.clone(),
                None => cfg.bounds.iter().map(|&(lo, hi)| r.random_range(lo..=hi)).collect(),
            };
            clamp(&mut x);
            x
        })
        .collect();
    let mut leaders = Vec::new();
    update_leaders(&mut leaders, &pack, &fitness_of(&objective, &pack));
    let mut history = vec![leaders[0].fit];
    let mut positions = vec![leaders[0].pos.clone()];
    for t in 1..cfg.iterations {
        let a = control_a(t, cfg.iterations);
        for x in &mut pack {
            for k in 0..d {
                let mut sum = 0.0;
                for l in &leaders {
                    let big_a = 2.0 * a * r.random::<f64>() - a;
                    let c = 2.0 * r.random::<f64>();
                    let dist = (c * l.pos[k] - x[k]).abs();
                    sum += l.pos[k] - big_a * dist;
                }
                x[k] = sum / leaders.len() as f64;
            }
            clamp(x);
        }
        let fit = fitness_of(&objective, &pack);
        update_leaders(&mut leaders, &pack, &fit);
        history.push(leaders[0].fit);
        positions.push(leaders[0].pos.clone());
    }
    Ok(SearchResult {
        best_position: leaders[0].pos.clone(),
        best_fitness: leaders[0].fit,
        history,
        positions,
    })
}

pub fn write_search_log(path: &Path, result: &SearchResult) -> Result<()> {
    let d = result.best_position.len();
    let mut header = vec!["iteration".to_string(), "best_fitness".to_string()];
    header.extend((0..d).map(|k| format!("best_position_{k}")));
    let rows: Vec<Vec<String>> = result
        .history
        .iter()
        .zip(&result.positions)
        .enumerate()
        .map(|(t, (f, p))| {
            let mut row = vec![t.to_string(), num(*f)];
            row.extend(p.iter().map(|v| num(*v)));
            row
        })
        .collect();
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(path, &h, &rows)
}

/// log10 bounds of every learning rate in the search.
pub const LR_LOG_BOUNDS: (f64, f64) = (-6.0, -2.0);

/// Decoded and sorted triple `(base_lr, min_lr, warmup_init_lr)`; the
/// largest value becomes the peak rate and the smallest the floor.
pub fn decode_lr_triple(x: &[f64]) -> (f64, f64, f64) {
    let mut v: Vec<f64> = x.iter().map(|e| 10f64.powf(*e)).collect();
    v.sort_by(f64::total_cmp);
    (v[2], v[0], v[1])
}

pub fn with_lr_triple(base: &SupervisedConfig, x: &[f64]) -> SupervisedConfig {
    let (base_lr, min_lr, warmup_init_lr) = decode_lr_triple(x);
    SupervisedConfig {
        base_lr,
        min_lr,
        warmup_init_lr,
        ..base.clone()
    }
}

fn encode(cfg: &SupervisedConfig) -> Vec<f64> {
    [cfg.base_lr, cfg.min_lr, cfg.warmup_init_lr]
        .iter()
        .map(|v| if *v > 0.0 { v.log10() } else { LR_LOG_BOUNDS.0 })
        .collect()
}

#[derive(Clone, Debug)]
pub struct LrSearchOutcome {
    pub config: SupervisedConfig,
    pub base_score: f64,
    pub best_score: f64,
    pub result: Option<SearchResult>,
}

/// Searches the learning-rate triple of `base` by maximizing `proxy`, a
/// validation score of a run truncated to `budget` epochs. The base triple
/// is wolf 0, so the returned score never falls below the base score. A
/// zero budget returns `base` untouched.
pub fn lr_search<P>(
    base: &SupervisedConfig,
    budget: usize,
    wolves: usize,
    iterations: usize,
    seed: u64,
    proxy: P,
) -> Result<LrSearchOutcome>
where
    P: Fn(&SupervisedConfig) -> Result<f64> + Sync,
{
    if budget == 0 {
        return Ok(LrSearchOutcome {
            config: base.clone(),
            base_score: f64::NAN,
            best_score: f64::NAN,
            result: None,
        });
    }
    let truncated = |c: SupervisedConfig| SupervisedConfig {
        epochs: budget,
        warmup_epochs: c.warmup_epochs.min(budget),
        small_label_factor: 1,
        ..c
    };
    let base_score = proxy(&truncated(base.clone()))?;
    let cfg = GwoConfig {
        wolves,
        iterations,
        bounds: vec![LR_LOG_BOUNDS; 3],
        seed,
    };
    let start = encode(base);
    let objective = |x: &[f64]| -> f64 {
        if x == start.as_slice() {
            return -base_score;
        }
        match proxy(&truncated(with_lr_triple(base, x))) {
            Ok(s) => -s,
            Err(e) => {
                log::warn!("proxy run failed at {x:?}: {e}");
                f64::INFINITY
            }
        }
    };
    let result = gwo_optimize_seeded(objective, &cfg, &[start.clone()])?;
    let best_score = -result.best_fitness;
    let config = if best_score > base_score {
        with_lr_triple(base, &result.best_position)
    } else {
        base.clone()
    };
    Ok(LrSearchOutcome {
        config,
        base_score,
        best_score: best_score.max(base_score),
        result: Some(result),
    })
}
