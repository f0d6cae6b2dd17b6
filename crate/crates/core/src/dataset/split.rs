use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, ImageSample};
use crate::error::{Error, Result};
use crate::rng;

/// How many training labels to keep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelBudget {
    /// Exactly `k` labels per class.
    PerClass(usize),
    /// `round(f * N)` labels overall, stratified by class.
    Fraction(f64),
}

/// Largest-remainder allocation of `round(f * N)` across classes.
pub(crate) fn stratified_quotas(counts: &[usize], fraction: f64) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    let total = (fraction * n as f64).round() as usize;
    let exact: Vec<f64> = counts.iter().map(|&c| fraction * c as f64).collect();
    let mut quotas: Vec<usize> = exact
        .iter()
        .zip(counts)
        .map(|(e, &c)| (e.floor() as usize).min(c))
        .collect();
    let mut rest = total.saturating_sub(quotas.iter().sum());
    let mut order: Vec<usize> = (0..counts.len()).collect();
    // largest fractional part first, lower class index on ties
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &c in order.iter().cycle().take(counts.len() * 2) {
        if rest == 0 {
            break;
        }
        if quotas[c] < counts[c] {
            quotas[c] += 1;
            rest -= 1;
        }
    }
    quotas
}

/// Splits labeled training samples into a labeled subset of the requested
/// budget and an unlabeled remainder with labels stripped.
pub fn subsample_labels(
    samples: &[ImageSample],
    class_count: usize,
    budget: LabelBudget,
    seed: u64,
) -> Result<DatasetSplit> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (i, s) in samples.iter().enumerate() {
        let label = s.label.ok_or_else(|| {
            Error::Config(format!("training sample {} has no label to subsample", s.id))
        })?;
        if label >= class_count {
            return Err(Error::LabelOutOfRange {
                id: s.id.clone(),
                label,
                classes: class_count,
            });
        }
        by_class[label].push(i);
    }
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let quotas = match budget {
        LabelBudget::PerClass(k) => {
            if let Some((class, &available)) = counts.iter().enumerate().find(|(_, &c)| c < k) {
                return Err(Error::InsufficientClass {
                    class,
                    available,
                    required: k,
                });
            }
            vec![k; class_count]
        }
        LabelBudget::Fraction(f) => {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("label fraction {f} outside [0,1]")));
            }
            stratified_quotas(&counts, f)
        }
    };

    let mut r = rng::rng(rng::derive(seed, "subsample"));
    let mut keep = vec![false; samples.len()];
    for (idx, quota) in by_class.iter_mut().zip(&quotas) {
        idx.shuffle(&mut r);
        for &i in idx.iter().take(*quota) {
            keep[i] = true;
        }
    }
    let mut split = DatasetSplit {
        class_count,
        ..DatasetSplit::default()
    };
    for (s, k) in samples.iter().zip(keep) {
        if k {
            split.labeled.push(s.clone());
        } else {
            split.unlabeled.push(s.unlabeled());
        }
    }
    Ok(split)
}

/// Replaces exactly `round(ratio * |labeled|)` labels by a uniformly drawn
/// different class.
pub fn inject_label_noise(split: &DatasetSplit, ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("noise ratio {ratio} outside [0,1]")));
    }
    let c = split.class_count;
    let mut out = split.clone();
    let n_flip = (ratio * out.labeled.len() as f64).round() as usize;
    if n_flip == 0 {
        return Ok(out);
    }
    if c < 2 {
        return Err(Error::Config("label noise needs at least two classes".into()));
    }
    let mut r = rng::rng(rng::derive(seed, "label-noise"));
    let mut order: Vec<usize> = (0..out.labeled.len()).collect();
    order.shuffle(&mut r);
    for &i in &order[..n_flip] {
        let s = &mut out.labeled[i];
        let old = s.label.expect("labeled sample without label");
        s.label = Some((old + 1 + r.random_range(0..c - 1)) % c);
    }
    Ok(out)
}

/// K (train, validation) pairs over a seeded permutation; fold sizes differ
/// by at most one, larger folds first.
pub fn kfold_split(
    samples: &[ImageSample],
    k: usize,
    seed: u64,
) -> Result<Vec<(Vec<ImageSample>, Vec<ImageSample>)>> {
    if k < 2 {
        return Err(Error::Config(format!("kfold needs K >= 2, got {k}")));
    }
    if k > samples.len() {
        return Err(Error::Config(format!(
            "kfold K={k} exceeds the {} available samples",
            samples.len()
        )));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng::rng(rng::derive(seed, "kfold")));
    let base = samples.len() / k;
    let extra = samples.len() % k;
    let mut fold_of = vec![0; samples.len()];
    let mut pos = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        for &i in &order[pos..pos + size] {
            fold_of[i] = f;
        }
        pos += size;
    }
    Ok((0..k)
        .map(|f| {
            let mut train = Vec::new();
            let mut val = Vec::new();
            for (s, &fi) in samples.iter().zip(&fold_of) {
                if fi == f {
                    val.push(s.clone());
                } else {
                    train.push(s.clone());
                }
            }
            (train, val)
        })
        .collect())
}
