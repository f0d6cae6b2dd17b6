//! Accuracy and confusion metrics, saliency maps and region-restricted
//! FGSM attacks.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ImageSample;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{classify_batch, unpatchify, Graph, ModelState};
use crate::report::{heatmap, num, plot_lines, write_csv, write_json};
use crate::tensor::Matrix;

pub const DEFAULT_SALIENCY_THRESHOLD: f64 = 0.3;
pub const DEFAULT_SALIENCY_SIGMA: f64 = 1.0;
pub const DEFAULT_EPSILONS: [f64; 6] = [0.0, 0.02, 0.04, 0.06, 0.08, 0.10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<u64>>,
    pub accuracy: f64,
    /// NaN for classes absent from the evaluated set.
    pub per_class_accuracy: Vec<f64>,
}

impl MetricsReport {
    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn metrics_from_predictions(predicted: &[usize], truth: &[usize], classes: usize) -> Result<MetricsReport> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", predicted.len(), truth.len())));
    }
    if truth.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p >= classes || t >= classes {
            return Err(Error::Config(format!("class {} outside {classes}", p.max(t))));
        }
        confusion[t][p] += 1;
    }
    let trace: u64 = (0..classes).map(|c| confusion[c][c]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: u64 = row.iter().sum();
            if n == 0 {
                f64::NAN
            } else {
                row[c] as f64 / n as f64
            }
        })
        .collect();
    Ok(MetricsReport {
        confusion,
        accuracy: trace as f64 / truth.len() as f64,
        per_class_accuracy,
    })
}

fn labels(samples: &[ImageSample], classes: usize) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| match s.label {
            Some(l) if l < classes => Ok(l),
            Some(l) => Err(Error::LabelOutOfRange {
                id: s.id.clone(),
                label: l,
                classes,
            }),
            None => Err(Error::Config(format!("evaluation sample {} has no label", s.id))),
        })
        .collect()
}

pub fn predict(state: &ModelState, images: &[&Image]) -> Result<Vec<usize>> {
    Ok(classify_batch(state, images)?.iter().map(|z| argmax(z)).collect())
}

pub fn evaluate(state: &ModelState, samples: &[ImageSample]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let classes = state.config.class_count;
    let truth = labels(samples, classes)?;
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    metrics_from_predictions(&predict(state, &images)?, &truth, classes)
}

pub fn accuracy(state: &ModelState, samples: &[ImageSample]) -> Result<f64> {
    Ok(evaluate(state, samples)?.accuracy)
}

/// Cross-entropy input gradients against each sample's label, batched.
pub fn input_gradients(state: &ModelState, samples: &[ImageSample]) -> Result<Vec<Image>> {
    let c = &state.config;
    let truth = labels(samples, c.class_count)?;
    let idx: Vec<usize> = (0..samples.len()).collect();
    let parts = idx
        .par_chunks(crate::optim::CHUNK)
        .map(|chunk| {
            let mut g = Graph::new(state, false);
            let patches = chunk
                .iter()
                .map(|&i| g.image_patches(&samples[i].image, true))
                .collect::<Result<Vec<_>>>()?;
            let logits = g.classify_logits_batch(&patches)?;
            let mut targets = vec![0.0; chunk.len() * c.class_count];
            for (k, &i) in chunk.iter().enumerate() {
                targets[k * c.class_count + truth[i]] = 1.0;
            }
            let loss = g.tape.weighted_soft_ce(logits, &targets, &vec![1.0; chunk.len()]);
            let mut grads = g.tape.backward(loss, 1.0);
            patches
                .iter()
                .map(|&p| {
                    let gp = grads.take(p).unwrap_or_else(|| Matrix::zeros(c.n_patches(), c.patch_len()));
                    unpatchify(&gp, c.patch_size, c.image_size, c.image_size, c.channels)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    /// Row-major, in `[0, 1]`.
    pub values: Vec<f64>,
    pub threshold: f64,
    pub focused_mask: Vec<bool>,
}

impl SaliencyMap {
    /// Channel-summed magnitude of `grad`, scaled so the maximum is 1. An
    /// all-zero gradient stays zero and focuses nothing.
    pub fn from_gradient(grad: &Image, threshold: f64) -> Self {
        let (h, w) = (grad.height, grad.width);
        let mut values: Vec<f64> = (0..h * w)
            .map(|p| (0..grad.channels).map(|c| grad.data[p * grad.channels + c].abs()).sum())
            .collect();
        let max = values.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            for v in &mut values {
                *v /= max;
            }
        }
        let focused_mask = values.iter().map(|&v| v > threshold).collect();
        Self {
            height: h,
            width: w,
            values,
            threshold,
            focused_mask,
        }
    }

    /// As [`SaliencyMap::from_gradient`], with the channel-summed magnitude
    /// blurred by a Gaussian of `sigma` pixels first (edge-renormalized).
    /// `sigma == 0` leaves it unblurred.
    pub fn from_gradient_smoothed(grad: &Image, sigma: f64, threshold: f64) -> Self {
        let (h, w) = (grad.height, grad.width);
        let mut mag: Vec<f64> = (0..h * w)
            .map(|p| (0..grad.channels).map(|c| grad.data[p * grad.channels + c].abs()).sum())
            .collect();
        if sigma > 0.0 {
            mag = gaussian_blur(&mag, h, w, sigma);
        }
        let flat = Image::from_vec(h, w, 1, mag).expect("magnitude has one value per pixel");
        Self::from_gradient(&flat, threshold)
    }

    pub fn unfocused_mask(&self) -> Vec<bool> {
        self.focused_mask.iter().map(|m| !m).collect()
    }
}

fn gaussian_blur(values: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (k, &kw) in kernel.iter().enumerate() {
                    let d = k as isize - r;
                    let (yy, xx) = if horizontal { (y as isize, x as isize + d) } else { (y as isize + d, x as isize) };
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    acc += kw * src[yy as usize * w + xx as usize];
                    norm += kw;
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(values, true), false)
}

/// Source of focused regions for the attack experiment.
pub trait SaliencyProvider: Sync {
    fn saliency(&self, state: &ModelState, samples: &[ImageSample]) -> Result<Vec<SaliencyMap>>;
}

/// Input-gradient magnitude, lightly blurred so the thresholded region is
/// a contiguous area rather than scattered pixels.
#[derive(Clone, Copy, Debug)]
pub struct InputGradientSaliency {
    pub threshold: f64,
    /// Gaussian blur in pixels; 0 keeps the raw magnitude.
    pub smoothing_sigma: f64,
}

impl Default for InputGradientSaliency {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_SALIENCY_THRESHOLD,
            smoothing_sigma: DEFAULT_SALIENCY_SIGMA,
        }
    }
}

impl SaliencyProvider for InputGradientSaliency {
    fn saliency(&self, state: &ModelState, samples: &[ImageSample]) -> Result<Vec<SaliencyMap>> {
        Ok(input_gradients(state, samples)?
            .iter()
            .map(|g| SaliencyMap::from_gradient_smoothed(g, self.smoothing_sigma, self.threshold))
            .collect())
    }
}

pub fn saliency(state: &ModelState, sample: &ImageSample) -> Result<SaliencyMap> {
    Ok(InputGradientSaliency::default()
        .saliency(state, std::slice::from_ref(sample))?
        .remove(0))
}

/// `clip(x + ε sign(grad))` on pixels inside `mask`; other pixels are
/// copied unchanged.
pub fn fgsm_perturb(image: &Image, grad: &Image, epsilon: f64, mask: &[bool]) -> Result<Image> {
    if !image.same_shape(grad) || mask.len() != image.height * image.width {
        return Err(Error::Shape("FGSM image, gradient and mask disagree".into()));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::Config(format!("FGSM epsilon {epsilon} must be >= 0")));
    }
    let mut out = image.clone();
    let ch = image.channels;
    for (p, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        for c in 0..ch {
            let k = p * ch + c;
            let g = grad.data[k];
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            out.data[k] = (image.data[k] + epsilon * s).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// FGSM on one sample using the gradient of its true label.
pub fn fgsm_attack(state: &ModelState, sample: &ImageSample, epsilon: f64, region_mask: &[bool]) -> Result<Image> {
    let grad = input_gradients(state, std::slice::from_ref(sample))?.remove(0);
    fgsm_perturb(&sample.image, &grad, epsilon, region_mask)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub epsilon: f64,
    pub focused_acc: f64,
    pub unfocused_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub clean_acc: f64,
    pub threshold: f64,
    /// Mean fraction of pixels marked focused.
    pub focused_fraction: f64,
    pub rows: Vec<AttackRow>,
}

/// Accuracy after attacking the focused region and, separately, its
/// complement, for every ε.
pub fn attack_experiment(
    state: &ModelState,
    samples: &[ImageSample],
    epsilons: &[f64],
    provider: &dyn SaliencyProvider,
) -> Result<AttackReport> {
    let clean = evaluate(state, samples)?;
    let classes = state.config.class_count;
    let truth = labels(samples, classes)?;
    let grads = input_gradients(state, samples)?;
    let maps = provider.saliency(state, samples)?;
    let threshold = maps.first().map_or(DEFAULT_SALIENCY_THRESHOLD, |m| m.threshold);
    let focused_fraction = maps
        .iter()
        .map(|m| m.focused_mask.iter().filter(|&&b| b).count() as f64 / m.focused_mask.len() as f64)
        .sum::<f64>()
        / maps.len() as f64;
    let acc_with = |eps: f64, focused: bool| -> Result<f64> {
        let attacked = samples
            .par_iter()
            .zip(&grads)
            .zip(&maps)
            .map(|((s, g), m)| {
                let mask = if focused { m.focused_mask.clone() } else { m.unfocused_mask() };
                fgsm_perturb(&s.image, g, eps, &mask)
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Image> = attacked.iter().collect();
        Ok(metrics_from_predictions(&predict(state, &refs)?, &truth, classes)?.accuracy)
    };
    let rows = epsilons
        .iter()
        .map(|&eps| {
            Ok(AttackRow {
                epsilon: eps,
                focused_acc: acc_with(eps, true)?,
                unfocused_acc: acc_with(eps, false)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttackReport {
        clean_acc: clean.accuracy,
        threshold,
        focused_fraction,
        rows,
    })
}

/// Fraction of samples whose mean saliency inside the expression mask
/// exceeds the mean outside it. Samples without a mask are skipped.
pub fn expression_focus_rate(maps: &[SaliencyMap], samples: &[ImageSample]) -> Option<f64> {
    let mut hits = 0usize;
    let mut n = 0usize;
    for (m, s) in maps.iter().zip(samples) {
        let Some(mask) = &s.expression_mask else { continue };
        let (mut sin, mut nin, mut sout, mut nout) = (0.0, 0usize, 0.0, 0usize);
        for (&v, &inside) in m.values.iter().zip(mask) {
            if inside {
                sin += v;
                nin += 1;
            } else {
                sout += v;
                nout += 1;
            }
        }
        if nin == 0 || nout == 0 {
            continue;
        }
        n += 1;
        hits += usize::from(sin / nin as f64 > sout / nout as f64);
    }
    (n > 0).then(|| hits as f64 / n as f64)
}

/// `metrics.json`, `confusion.csv` and `confusion.png` under `dir`.
pub fn write_metrics(dir: &Path, report: &MetricsReport) -> Result<()> {
    write_json(&dir.join("metrics.json"), report)?;
    let classes = report.confusion.len();
    let mut header = vec!["true".to_string()];
    header.extend((0..classes).map(|c| format!("pred_{c}")));
    header.push("class_acc".into());
    let rows: Vec<Vec<String>> = report
        .confusion
        .iter()
        .enumerate()
        .map(|(t, row)| {
            let mut r = vec![t.to_string()];
            r.extend(row.iter().map(u64::to_string));
            r.push(num(report.per_class_accuracy[t]));
            r
        })
        .collect();
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&dir.join("confusion.csv"), &h, &rows)?;
    let cells: Vec<Vec<f64>> = report
        .confusion
        .iter()
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect();
    heatmap(&dir.join("confusion.png"), &cells, 24)
}

/// `attack.json`, `attack.csv` and `attack.png` under `dir`.
pub fn write_attack(dir: &Path, report: &AttackReport) -> Result<()> {
    write_json(&dir.join("attack.json"), report)?;
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| vec![num(r.epsilon), num(r.focused_acc), num(r.unfocused_acc)])
        .collect();
    write_csv(&dir.join("attack.csv"), &["epsilon", "focused_acc", "unfocused_acc"], &rows)?;
    let f: Vec<(f64, f64)> = report.rows.iter().map(|r| (r.epsilon, r.focused_acc)).collect();
    let u: Vec<(f64, f64)> = report.rows.iter().map(|r| (r.epsilon, r.unfocused_acc)).collect();
    plot_lines(&dir.join("attack.png"), &[f, u])
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::dataset::{synth_generate, SynthSpec};
    use crate::model::{input_gradient, ModelConfig};
    use crate::rng;

    fn small() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            decoder_embed_dim: 8,
            decoder_depth: 1,
            decoder_heads: 1,
            ..ModelConfig::tiny()
        }
    }

    fn samples(n: usize, seed: u64) -> Vec<ImageSample> {
        synth_generate(&SynthSpec {
            n_samples: n,
            image_size: 16,
            seed,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let truth = [0, 1, 2, 0, 1, 2];
        let m = metrics_from_predictions(&truth, &truth, 3).unwrap();
        assert_eq!(m.accuracy, 1.0);
        for (t, row) in m.confusion.iter().enumerate() {
            for (p, &v) in row.iter().enumerate() {
                assert_eq!(v, if p == t { 2 } else { 0 });
            }
        }
        let m = metrics_from_predictions(&[1; 6], &truth, 3).unwrap();
        assert!((m.accuracy - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.per_class_accuracy, vec![0.0, 1.0, 0.0]);
        assert!(metrics_from_predictions(&[], &[], 3).is_err());
    }

    #[test]
    fn random_predictions_match_a_tally() {
        let mut r = rng::rng(4);
        let truth: Vec<usize> = (0..500).map(|_| r.random_range(0..4)).collect();
        let pred: Vec<usize> = (0..500).map(|_| r.random_range(0..4)).collect();
        let m = metrics_from_predictions(&pred, &truth, 4).unwrap();
        let mut correct = 0;
        for i in 0..500 {
            if pred[i] == truth[i] {
                correct += 1;
            }
        }
        assert_eq!(m.accuracy, correct as f64 / 500.0);
        assert_eq!(m.total(), 500);
        for c in 0..4 {
            let n = truth.iter().filter(|&&t| t == c).count() as u64;
            assert_eq!(m.confusion[c].iter().sum::<u64>(), n);
        }
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.25; 4]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
    }

    #[test]
    fn batched_gradients_match_single() {
        let c = small();
        let s = ModelState::new(&c, 1).unwrap();
        let data = samples(5, 1);
        let gs = input_gradients(&s, &data).unwrap();
        for (g, d) in gs.iter().zip(&data) {
            let (_, one) = input_gradient(&s, &d.image, d.label.unwrap()).unwrap();
            for (a, b) in g.data.iter().zip(&one.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_model_gives_empty_saliency() {
        let c = small();
        let mut s = ModelState::new(&c, 2).unwrap();
        for p in &mut s.params {
            p.value = Matrix::zeros(p.value.rows, p.value.cols);
        }
        let d = samples(1, 2);
        let m = saliency(&s, &d[0]).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.0));
        assert!(m.focused_mask.iter().all(|&b| !b));
    }

    #[test]
    fn saliency_is_normalized() {
        let c = small();
        let s = ModelState::new(&c, 3).unwrap();
        for d in samples(4, 3) {
            let m = saliency(&s, &d).unwrap();
            assert_eq!((m.height, m.width, m.values.len()), (16, 16, 256));
            assert!(m.values.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!((m.values.iter().copied().fold(0.0, f64::max) - 1.0).abs() < 1e-12);
            for (v, f) in m.values.iter().zip(&m.focused_mask) {
                assert_eq!(*f, *v > 0.3);
            }
        }
    }

    #[test]
    fn smoothing_spreads_a_spike_and_keeps_flat_maps_flat() {
        let mut grad = Image::new(9, 9, 3);
        grad.set(4, 4, 1, -2.0);
        let raw = SaliencyMap::from_gradient(&grad, 0.3);
        assert_eq!(SaliencyMap::from_gradient_smoothed(&grad, 0.0, 0.3), raw);
        let m = SaliencyMap::from_gradient_smoothed(&grad, 1.0, 0.3);
        assert_eq!(m.values[4 * 9 + 4], 1.0);
        // one pixel away the weight is exp(-1/2)
        assert!((m.values[4 * 9 + 5] - (-0.5f64).exp()).abs() < 1e-12);
        assert!((m.values[3 * 9 + 4] - m.values[4 * 9 + 3]).abs() < 1e-12);
        assert!(m.focused_mask.iter().filter(|&&b| b).count() > raw.focused_mask.iter().filter(|&&b| b).count());

        let flat = Image::filled(5, 7, 3, 0.25);
        let m = SaliencyMap::from_gradient_smoothed(&flat, 1.5, 0.3);
        assert!(m.values.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    proptest! {
        #[test]
        fn fgsm_bounds_and_mask(seed in 0u64..1000, eps in 0.0f64..0.2) {
            let mut r = rng::rng(seed);
            let img = Image::from_vec(6, 6, 3, (0..108).map(|_| r.random()).collect()).unwrap();
            let grad = Image::from_vec(6, 6, 3, (0..108).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
            let mask: Vec<bool> = (0..36).map(|_| r.random_bool(0.5)).collect();
            let out = fgsm_perturb(&img, &grad, eps, &mask).unwrap();
            prop_assert!(out.in_unit_range());
            for p in 0..36 {
                for c in 0..3 {
                    let k = p * 3 + c;
                    prop_assert!((out.data[k] - img.data[k]).abs() <= eps + 1e-15);
                    if !mask[p] {
                        prop_assert_eq!(out.data[k].to_bits(), img.data[k].to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn zero_epsilon_rows_equal_clean_accuracy() {
        let c = small();
        let s = ModelState::new(&c, 4).unwrap();
        let data = samples(12, 4);
        assert_eq!(fgsm_attack(&s, &data[0], 0.0, &[true; 256]).unwrap(), data[0].image);
        let rep = attack_experiment(&s, &data, &DEFAULT_EPSILONS, &InputGradientSaliency::default()).unwrap();
        assert_eq!(rep.rows.len(), 6);
        assert_eq!(rep.rows[0].focused_acc, rep.clean_acc);
        assert_eq!(rep.rows[0].unfocused_acc, rep.clean_acc);
        let dir = tempfile::tempdir().unwrap();
        write_attack(dir.path(), &rep).unwrap();
        write_metrics(dir.path(), &evaluate(&s, &data).unwrap()).unwrap();
        assert!(dir.path().join("confusion.png").exists());
    }
}
