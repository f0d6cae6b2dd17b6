//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. `SSFER_ACCEPTANCE=1,3,9` restricts the run to the listed
//! criteria.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng as _;

use ssfer_core::augment::{
    apply_augment, fsim, iou, kappa, mix_images, psnr, sample_lambda, ssim, AugmentPolicy, KappaMetric,
};
use ssfer_core::config::{DataSource, TrainConfig};
use ssfer_core::dataset::{synth_generate, BoxProvider, FaceBox, ImageSample, LabelBudget, SynthSpec};
use ssfer_core::experiments::{attack_study, run_experiment, seed_study, Experiment, ExperimentOptions, SeedStudy};
use ssfer_core::hpo::{gwo_optimize, GwoConfig};
use ssfer_core::image::Image;
use ssfer_core::model::{classify_batch, count_params_flops, Graph, MaskPattern, ModelConfig, ModelGrads, ModelState};
use ssfer_core::optim::batch_gradients;
use ssfer_core::pipeline::{run_pipeline, PipelineOptions};
use ssfer_core::pretrain::{recon_graph_loss, run_pretrain, PretrainConfig};
use ssfer_core::rng;
use ssfer_core::semisup::{ema_update, pseudo_label, semisup_items, total_loss, unlabeled_loss, PseudoLabelBatch};
use ssfer_core::supervised::{
    batch_items, cross_entropy, facemix_batch_loss, facemix_items, facemix_loss, items_gradients, one_hot,
    plain_items, soft_ce, FaceMixTag, MixMode, PairPlan, SupervisedConfig,
};

type Check = Result<String, String>;

const TOL: f64 = 1e-6;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
    let mut r = rng::rng(seed);
    let data = (0..h * w * c).map(|_| r.random::<f64>()).collect();
    Image::from_vec(h, w, c, data).unwrap()
}

fn synth(n: usize, jitter: f64, seed: u64) -> Vec<ImageSample> {
    synth_generate(&SynthSpec {
        n_samples: n,
        class_count: 3,
        image_size: 32,
        jitter,
        seed,
    })
    .unwrap()
}

fn fbox(x0: u32, y0: u32, x1: u32, y1: u32) -> FaceBox {
    FaceBox::new(x0, y0, x1, y1).unwrap()
}

// ---------------------------------------------------------------- 1

fn mixing_examples() -> Check {
    let a = random_image(8, 8, 3, 1);
    let b = random_image(8, 8, 3, 2);
    let (ya, yb) = (one_hot(0, 3), one_hot(2, 3));
    let (x, y) = mix_images(&a, &ya, &b, &yb, 1.0).map_err(err)?;
    ensure!(x == a && y == ya, "lambda = 1 is not the identity");
    let (_, y) = mix_images(&a, &one_hot(1, 2), &b, &one_hot(0, 2), 0.5).map_err(err)?;
    ensure!(close(y[0], 0.5) && close(y[1], 0.5), "50:50 mix gave {y:?}");
    let mut r = rng::rng(3);
    for _ in 0..100 {
        let lam: f64 = r.random();
        let (_, y) = mix_images(&a, &ya, &b, &yb, lam).map_err(err)?;
        ensure!(close(y.iter().sum(), 1.0), "mixed label sums to {}", y.iter().sum::<f64>());
        ensure!(close(y[0], lam) && close(y[2], 1.0 - lam) && y[1] == 0.0, "entries {y:?} for lambda {lam}");
    }
    ensure!(mix_images(&a, &ya, &random_image(4, 4, 3, 4), &yb, 0.5).is_err(), "shape mismatch accepted");

    let draws = 100_000u64;
    let mut sum = 0.0;
    let mut below = 0u64;
    for k in 0..draws {
        let l200 = sample_lambda(200.0, rng::derive_n(11, k)).map_err(err)?;
        let l1 = sample_lambda(1.0, rng::derive_n(12, k)).map_err(err)?;
        ensure!((0.0..=1.0).contains(&l200) && (0.0..=1.0).contains(&l1), "lambda outside [0, 1]");
        sum += l200;
        below += u64::from(l1 <= 0.5);
    }
    let mean = sum / draws as f64;
    let cdf = below as f64 / draws as f64;
    ensure!((mean - 0.5).abs() <= 0.01, "Beta(200, 200) mean {mean}");
    ensure!((cdf - 0.5).abs() <= 0.01, "Beta(1, 1) CDF at 0.5 is {cdf}");
    Ok(format!("beta mean {mean:.4}, uniform cdf {cdf:.4}"))
}

fn box_and_similarity_examples() -> Check {
    let b = fbox(3, 4, 10, 12);
    ensure!(iou(&b, &b) == 1.0, "iou(B, B) != 1");
    ensure!(iou(&fbox(0, 0, 2, 2), &fbox(5, 5, 7, 7)) == 0.0, "disjoint boxes overlap");
    let v = iou(&fbox(0, 0, 2, 2), &fbox(1, 1, 3, 3));
    ensure!(close(v, 1.0 / 7.0), "overlapping example gives {v}");

    let img = random_image(16, 16, 3, 5);
    let mut si = ImageSample {
        id: "i".into(),
        image: img.clone(),
        label: Some(0),
        face_box: Some(fbox(0, 0, 2, 2)),
        expression_mask: None,
    };
    let boxes = BoxProvider::Stored;
    for m in [KappaMetric::Iou, KappaMetric::Psnr, KappaMetric::Ssim, KappaMetric::Fsim] {
        let k = kappa(&si, &si, m, &boxes).map_err(err)?;
        ensure!(close(k, 0.0), "self kappa under {m:?} is {k}");
    }
    let mut sj = si.clone();
    sj.face_box = Some(fbox(1, 1, 3, 3));
    let k = kappa(&si, &sj, KappaMetric::Iou, &boxes).map_err(err)?;
    ensure!(close(k, 6.0 / 7.0), "iou kappa {k}");

    // ±0.1 on every pixel of an image kept inside [0.1, 0.9]: MSE exactly 0.01
    let mut r = rng::rng(6);
    let base: Vec<f64> = (0..16 * 16 * 3).map(|_| 0.1 + 0.8 * r.random::<f64>()).collect();
    let noisy: Vec<f64> = base
        .iter()
        .map(|v| if r.random::<bool>() { v + 0.1 } else { v - 0.1 })
        .collect();
    si.image = Image::from_vec(16, 16, 3, base).map_err(err)?;
    sj.image = Image::from_vec(16, 16, 3, noisy).map_err(err)?;
    let p = psnr(&si.image, &sj.image).map_err(err)?;
    ensure!(close(p, 20.0), "PSNR at MSE 0.01 is {p}");
    let k = kappa(&si, &sj, KappaMetric::Psnr, &boxes).map_err(err)?;
    ensure!(close(k, 1.0 - 20.0 / 50.0), "psnr kappa {k}");
    let s = ssim(&img, &img).map_err(err)?;
    let f = fsim(&img, &img).map_err(err)?;
    ensure!(close(s, 1.0) && close(f, 1.0), "self SSIM {s}, FSIM {f}");

    let flat = AugmentPolicy {
        crop_scale_range: (1.0, 1.0),
        flip_prob: 0.0,
        ..AugmentPolicy::weak()
    };
    ensure!(apply_augment(&flat, &img, 9) == img, "fixed crop without flip changed the image");
    let strong = AugmentPolicy::strong();
    ensure!(apply_augment(&strong, &img, 9) == apply_augment(&strong, &img, 9), "augment not deterministic");
    for k in 0..1000 {
        let x = random_image(16, 16, 3, 100 + k);
        let y = apply_augment(&strong, &x, k);
        ensure!(y.same_shape(&x) && y.in_unit_range(), "strong augment left [0, 1] on image {k}");
    }
    Ok("iou 1/7, kappa 6/7, PSNR 20 dB".into())
}

fn supervised_loss_examples() -> Check {
    let z = [0.3, -1.2, 2.0];
    ensure!(close(soft_ce(&z, &one_hot(2, 3)), cross_entropy(&z, 2)), "one-hot soft CE differs from CE");
    for c in [2usize, 3, 7] {
        let v = soft_ce(&vec![0.4; c], &vec![1.0 / c as f64; c]);
        ensure!(close(v, (c as f64).ln()), "uniform soft CE over {c} classes is {v}");
    }
    let v = soft_ce(&[1.5, 1.5], &[0.5, 0.5]);
    ensure!(close(v, 2f64.ln()), "half/half soft CE {v}");
    ensure!(soft_ce(&[60.0, 0.0, 0.0], &one_hot(0, 3)) <= TOL, "saturated soft CE not near zero");

    let (lv, li, lj) = (0.7, 0.4, 0.5);
    ensure!(close(facemix_loss(FaceMixTag::L4, lv, li, lj, 0.0), lv), "L4 at kappa 0");
    ensure!(close(facemix_loss(FaceMixTag::L4, lv, li, lj, 1.0), lv + li + lj), "L4 at kappa 1");
    let v = facemix_loss(FaceMixTag::L1, lv, li, lj, 1.0);
    ensure!(close(v, 0.9), "L1 at kappa 1 is {v}");
    for tag in FaceMixTag::ALL {
        for k in [0.0, 0.3, 1.0] {
            let b = facemix_loss(tag, lv, li, lj, k);
            ensure!(
                facemix_loss(tag, lv + 0.1, li, lj, k) >= b
                    && facemix_loss(tag, lv, li + 0.1, lj, k) >= b
                    && facemix_loss(tag, lv, li, lj + 0.1, k) >= b,
                "{tag} decreases in a loss term"
            );
        }
    }

    let state = ModelState::new(&ModelConfig::desk(), 21).map_err(err)?;
    let samples = synth(8, 0.0, 22);
    let batch: Vec<&ImageSample> = samples.iter().collect();
    let boxes = BoxProvider::Stored;
    let fm = SupervisedConfig::default();
    let mixup = SupervisedConfig {
        mode: MixMode::Mixup,
        ..SupervisedConfig::default()
    };
    let a = facemix_batch_loss(&state, &batch, &fm, &boxes, 23).map_err(err)?;
    let b = facemix_batch_loss(&state, &batch, &mixup, &boxes, 23).map_err(err)?;
    ensure!(close(a, b), "identical boxes: FaceMix {a} vs Mixup {b}");

    let pair = &samples[..2];
    let views: Vec<Image> = pair.iter().map(|s| s.image.clone()).collect();
    let labels = [0usize, 2];
    let kap = 6.0 / 7.0;
    let plan = [PairPlan {
        i: 0,
        j: 1,
        lambda: 0.5,
        kappa: kap,
    }];
    let items = facemix_items(&views, &labels, 3, &plan, FaceMixTag::L4, MixMode::Facemix).map_err(err)?;
    let logits = classify_batch(&state, &items.iter().map(|it| &it.image).collect::<Vec<_>>()).map_err(err)?;
    let got: f64 = logits.iter().zip(&items).map(|(z, it)| it.weight * soft_ce(z, &it.target)).sum();
    let mut mixed = views[0].clone();
    for (o, v) in mixed.data.iter_mut().zip(&views[1].data) {
        *o = 0.5 * *o + 0.5 * v;
    }
    let zs = classify_batch(&state, &[&mixed, &views[0], &views[1]]).map_err(err)?;
    let virtual_loss = -(0.5 * log_softmax(&zs[0])[0] + 0.5 * log_softmax(&zs[0])[2]);
    let oracle = virtual_loss + kap * (-log_softmax(&zs[1])[0] - log_softmax(&zs[2])[2]);
    ensure!(close(got, oracle), "two-sample FaceMix {got} vs hand oracle {oracle}");
    Ok(format!("two-sample FaceMix loss {got:.6}"))
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

fn filled_state(base: &ModelState, v: f64) -> ModelState {
    let mut s = base.clone();
    for p in &mut s.params {
        p.value.data.iter_mut().for_each(|x| *x = v);
    }
    s
}

fn semisup_examples() -> Check {
    let base = ModelState::new(&ModelConfig::desk(), 31).map_err(err)?;
    let student = ModelState::new(&ModelConfig::desk(), 32).map_err(err)?;
    let mut t = base.clone();
    ema_update(&mut t, &student, 1.0).map_err(err)?;
    ensure!(t == base, "m = 1 moved the teacher");
    ema_update(&mut t, &student, 0.0).map_err(err)?;
    ensure!(t.params == student.params, "m = 0 did not copy the student");
    let mut t = filled_state(&base, 0.5);
    ema_update(&mut t, &filled_state(&base, 0.7), 0.999).map_err(err)?;
    ensure!(t.params.iter().flat_map(|p| &p.value.data).all(|&v| close(v, 0.5002)), "scalar probe is not 0.5002");

    let mut t = base.clone();
    for _ in 0..10 {
        ema_update(&mut t, &student, 0.9).map_err(err)?;
    }
    let f = 0.9f64.powi(10);
    for ((a, b), s) in t.params.iter().zip(&base.params).zip(&student.params) {
        for ((x, x0), y) in a.value.data.iter().zip(&b.value.data).zip(&s.value.data) {
            ensure!(((x - y) - f * (x0 - y)).abs() <= TOL, "frozen-student EMA gap in {}", a.name);
        }
    }

    let pl = pseudo_label(&[vec![0.1, 0.7, 0.2], vec![0.25; 4]], 0.5);
    ensure!(pl.classes == [1, 0], "pseudo-label classes {:?}", pl.classes);
    ensure!(close(pl.confidences[0], 0.7) && close(pl.confidences[1], 0.25), "confidences {:?}", pl.confidences);
    ensure!(pl.accept_mask == [true, false], "accept mask {:?}", pl.accept_mask);
    let mut r = rng::rng(33);
    let rows: Vec<Vec<f64>> = (0..100)
        .map(|_| {
            let v: Vec<f64> = (0..5).map(|_| r.random::<f64>()).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
        .collect();
    let pl = pseudo_label(&rows, 0.3);
    for (k, row) in rows.iter().enumerate() {
        let mut best = 0;
        for c in 1..row.len() {
            if row[c] > row[best] {
                best = c;
            }
        }
        ensure!(pl.classes[k] == best && pl.confidences[k] == row[best], "row {k} argmax scan disagrees");
    }

    let logits = vec![vec![1.0, -0.5, 0.2], vec![0.0, 2.0, -1.0]];
    let gate = PseudoLabelBatch {
        classes: vec![2, 1],
        confidences: vec![0.99, 0.50],
        accept_mask: vec![true, false],
    };
    let v = unlabeled_loss(&logits, &gate, 0.95);
    ensure!(close(v, -log_softmax(&logits[0])[2] / 2.0), "N_U = 2 gated loss {v}");
    ensure!(unlabeled_loss(&logits, &gate, 0.995) == 0.0, "all-rejected batch has nonzero loss");
    let v = unlabeled_loss(&logits, &gate, 0.0);
    let mean = (-log_softmax(&logits[0])[2] - log_softmax(&logits[1])[1]) / 2.0;
    ensure!(close(v, mean), "tau = 0 loss {v} vs mean CE {mean}");

    ensure!(close(total_loss(0.4, 0.9, 0.0), 0.4), "mu = 0");
    ensure!(close(total_loss(0.3, 0.2, 1.0), 0.5), "(0.3, 0.2, 1.0)");
    ensure!(close(total_loss(0.1, 0.25, 2.0), 0.6), "(0.1, 0.25, 2.0)");
    ensure!(MaskPattern::mask_count(196, 0.75) == 147 && MaskPattern::mask_count(64, 0.9) == 57, "mask counts");
    Ok("ema 0.5002, gated loss and total loss exact".into())
}

fn criterion_1() -> Check {
    let parts = [
        mixing_examples()?,
        box_and_similarity_examples()?,
        supervised_loss_examples()?,
        semisup_examples()?,
    ];
    Ok(parts.join("; "))
}

// ---------------------------------------------------------------- 2

/// Central differences on a random 1% of the scalar parameters whose name
/// passes `include`.
fn fd_check<F>(state: &ModelState, grads: &ModelGrads, loss: F, include: fn(&str) -> bool, seed: u64) -> Check
where
    F: Fn(&ModelState) -> f64,
{
    let slots: Vec<(usize, usize)> = state
        .params
        .iter()
        .enumerate()
        .filter(|(_, p)| include(&p.name))
        .flat_map(|(i, p)| (0..p.value.len()).map(move |k| (i, k)))
        .collect();
    let n = slots.len().div_ceil(100);
    let picks = rand::seq::index::sample(&mut rng::rng(seed), slots.len(), n);
    let h = 1e-4;
    let mut s = state.clone();
    let mut worst: f64 = 0.0;
    for idx in picks {
        let (pi, k) = slots[idx];
        let orig = s.params[pi].value.data[k];
        s.params[pi].value.data[k] = orig + h;
        let up = loss(&s);
        s.params[pi].value.data[k] = orig - h;
        let down = loss(&s);
        s.params[pi].value.data[k] = orig;
        let fd = (up - down) / (2.0 * h);
        let an = grads.tensors[pi].data[k];
        let scale = fd.abs().max(an.abs());
        ensure!(
            (fd - an).abs() <= 1e-3 * scale + 1e-8,
            "{}[{k}]: analytic {an:e} vs numeric {fd:e}",
            s.params[pi].name
        );
        if scale > 1e-6 {
            worst = worst.max((fd - an).abs() / scale);
        }
    }
    Ok(format!("{n} params, worst rel {worst:.1e}"))
}

fn classifier_param(name: &str) -> bool {
    !name.starts_with("decoder.")
}

fn any_param(_: &str) -> bool {
    true
}

fn mean_ce(state: &ModelState, images: &[Image], labels: &[usize]) -> f64 {
    let logits = classify_batch(state, &images.iter().collect::<Vec<_>>()).unwrap();
    logits.iter().zip(labels).map(|(z, &c)| cross_entropy(z, c)).sum::<f64>() / labels.len() as f64
}

fn criterion_2() -> Check {
    let cfg = ModelConfig::tiny();
    let state = ModelState::new(&cfg, 41).map_err(err)?;
    let samples = synth(4, 0.3, 42);
    let images: Vec<Image> = samples.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label.unwrap()).collect();

    let items = plain_items(&images[..3], &labels[..3], 3, 1.0 / 3.0);
    let (_, g) = items_gradients(&state, &items).map_err(err)?;
    let ce = fd_check(&state, &g, |s| mean_ce(s, &images[..3], &labels[..3]), classifier_param, 43)?;

    let masks: Vec<MaskPattern> = (0..2).map(|k| ssfer_core::model::sample_mask(cfg.n_patches(), 0.75, 44 + k)).collect();
    let recon: Vec<(&Image, &MaskPattern)> = images[..2].iter().zip(&masks).collect();
    let (_, g) = batch_gradients(&state, &recon, |gr, c| recon_graph_loss(gr, c, true)).map_err(err)?;
    let recon_value = |s: &ModelState| {
        let mut gr = Graph::new(s, false);
        let l = recon_graph_loss(&mut gr, &recon, true).unwrap();
        gr.tape.value(l).item()
    };
    let mae = fd_check(&state, &g, recon_value, any_param, 45)?;

    let batch: Vec<&ImageSample> = samples.iter().collect();
    let boxes = BoxProvider::Stored;
    let sc = SupervisedConfig::default();
    let (_, g) = items_gradients(&state, &batch_items(&batch, &sc, 3, &boxes, 46).map_err(err)?).map_err(err)?;
    let fm = fd_check(
        &state,
        &g,
        |s| facemix_batch_loss(s, &batch, &sc, &boxes, 46).unwrap(),
        classifier_param,
        47,
    )?;

    let strong: Vec<Image> = samples.iter().map(|s| apply_augment(&AugmentPolicy::strong(), &s.image, 48)).collect();
    let gate = PseudoLabelBatch {
        classes: vec![1, 0, 2, 1],
        confidences: vec![0.99, 0.5, 0.97, 0.2],
        accept_mask: vec![true, false, true, false],
    };
    let (tau, mu) = (0.95, 1.5);
    let items = semisup_items(&images[..2], &labels[..2], &strong, &gate, mu, 3);
    let (_, g) = items_gradients(&state, &items).map_err(err)?;
    let total = |s: &ModelState| {
        let z = classify_batch(s, &strong.iter().collect::<Vec<_>>()).unwrap();
        total_loss(mean_ce(s, &images[..2], &labels[..2]), unlabeled_loss(&z, &gate, tau), mu)
    };
    let semi = fd_check(&state, &g, total, classifier_param, 49)?;
    Ok(format!("ce {ce}; recon {mae}; facemix {fm}; semisup {semi}"))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Check {
    let mut r = rng::rng(51);
    let mut random_box = || {
        let (x0, x1) = loop {
            let (a, b) = (r.random_range(0..=64u32), r.random_range(0..=64u32));
            if a != b {
                break (a.min(b), a.max(b));
            }
        };
        let (y0, y1) = loop {
            let (a, b) = (r.random_range(0..=64u32), r.random_range(0..=64u32));
            if a != b {
                break (a.min(b), a.max(b));
            }
        };
        fbox(x0, y0, x1, y1)
    };
    let inside = |b: &FaceBox, x: u32, y: u32| x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1;
    for k in 0..1000 {
        let (a, b) = (random_box(), random_box());
        let (mut inter, mut union) = (0u64, 0u64);
        for y in 0..64 {
            for x in 0..64 {
                let (ia, ib) = (inside(&a, x, y), inside(&b, x, y));
                inter += u64::from(ia && ib);
                union += u64::from(ia || ib);
            }
        }
        let want = inter as f64 / union as f64;
        let got = iou(&a, &b);
        ensure!(got == want, "pair {k}: {a:?} {b:?} iou {got} vs count {want}");
    }
    Ok("1000 pairs exact".into())
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Check {
    let model = ModelConfig::tiny();
    let samples = synth(500, 0.3, 61);
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let cfg = PretrainConfig {
        epochs: 200,
        warmup_epochs: 10,
        base_lr: 1.5e-3,
        min_lr: 0.0,
        batch_size: 64,
        ..PretrainConfig::default()
    };
    let out = run_pretrain(&cfg, &model, &images, 62).map_err(err)?;
    let first = out.history.first().ok_or("no epochs logged")?.loss;
    let last = out.history.last().ok_or("no epochs logged")?.loss;
    ensure!(out.history.iter().all(|e| e.loss.is_finite()), "non-finite loss in the curve");
    ensure!(out.state.non_finite().is_none(), "non-finite parameter after pretraining");
    let want = MaskPattern::mask_count(model.n_patches(), 0.75);
    ensure!(want == (0.75 * model.n_patches() as f64).floor() as usize, "mask count rule");
    ensure!(
        out.mask_count_range == Some((want, want)),
        "mask counts {:?}, expected {want} every step",
        out.mask_count_range
    );
    ensure!(last <= 0.5 * first, "final loss {last:.4} above half of epoch 1 ({first:.4})");
    Ok(format!("epoch 1 {first:.4} -> epoch 200 {last:.4}, {want} masked every step"))
}

// ---------------------------------------------------------------- 5, 6

fn desk() -> TrainConfig {
    let mut c = TrainConfig::desk();
    c.data.source = DataSource::Synth {
        spec: SynthSpec {
            n_samples: 2000,
            class_count: 3,
            image_size: 32,
            jitter: 0.3,
            seed: 0,
        },
        test_samples: 500,
    };
    c.data.budget = LabelBudget::Fraction(0.1);
    c
}

fn mean_of(studies: &[SeedStudy], f: fn(&SeedStudy) -> f64) -> f64 {
    studies.iter().map(f).sum::<f64>() / studies.len() as f64
}

fn criterion_5(studies: &[SeedStudy]) -> Check {
    let (both, base) = (mean_of(studies, |s| s.both), mean_of(studies, |s| s.baseline));
    let inverted = studies.iter().filter(|s| s.both < s.baseline).count();
    let detail = format!("full {both:.4} vs baseline {base:.4}, {inverted} inverted seed(s)");
    ensure!(both >= base && inverted <= 1, "{detail}");
    Ok(detail)
}

fn criterion_6(studies: &[SeedStudy]) -> Check {
    let (ema, fix) = (mean_of(studies, |s| s.both), mean_of(studies, |s| s.fixmatch));
    let detail = format!("ema-teacher {ema:.4} vs fixmatch {fix:.4}");
    ensure!(ema >= fix, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Check {
    let study = attack_study(&desk(), &[0.0, 0.04]).map_err(err)?;
    let r = &study.report;
    let zero = &r.rows[0];
    ensure!(
        zero.focused_acc == r.clean_acc && zero.unfocused_acc == r.clean_acc,
        "epsilon 0 rows {} / {} vs clean {}",
        zero.focused_acc,
        zero.unfocused_acc,
        r.clean_acc
    );
    let at = &r.rows[1];
    let detail = format!(
        "clean {:.4}; eps 0.04 focused {:.4} vs unfocused {:.4}",
        r.clean_acc, at.focused_acc, at.unfocused_acc
    );
    ensure!(at.focused_acc <= at.unfocused_acc, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Check {
    let cfg = desk();
    let dir = tempfile::tempdir().map_err(err)?;
    let mut opts = ExperimentOptions::for_config(&cfg);
    opts.seeds = (0..3).map(|i| cfg.seed + i).collect();
    opts.noise_ratios = vec![0.0, 0.1, 0.2, 0.3];
    let report = run_experiment(Experiment::Noise, &cfg, &opts, dir.path()).map_err(err)?;
    let csv = std::fs::read_to_string(&report.csv).map_err(err)?;
    let header = csv.lines().next().unwrap_or_default();
    ensure!(header.split(',').any(|h| h == "decline"), "no decline column in {header:?}");
    let rows = noise_rows(&report.table.rows)?;
    let acc = &rows[0];
    for w in acc.windows(2) {
        ensure!(w[1] <= w[0] + 0.01, "accuracy rises from {:.4} to {:.4}", w[0], w[1]);
    }
    Ok(format!(
        "accuracies {}",
        acc.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(" / ")
    ))
}

fn noise_rows(rows: &[Vec<String>]) -> Result<Vec<Vec<f64>>, String> {
    rows.iter()
        .map(|r| {
            r[1..r.len() - 1]
                .iter()
                .map(|v| v.parse::<f64>().map_err(err))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect()
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Check {
    let sphere = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
    let mut total = 0.0;
    for seed in 0..5 {
        let cfg = GwoConfig {
            wolves: 20,
            iterations: 200,
            bounds: vec![(-5.0, 5.0); 3],
            seed,
        };
        let r = gwo_optimize(sphere, &cfg).map_err(err)?;
        ensure!(r.history.windows(2).all(|w| w[1] <= w[0]), "seed {seed}: history increases");
        total += r.best_fitness;
    }
    let mean = total / 5.0;
    ensure!(mean < 1e-4, "mean best fitness {mean:e}");
    Ok(format!("mean best fitness {mean:.2e}"))
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Check {
    let c = count_params_flops(&ModelConfig::vit_base(7));
    let params = c.params as f64 / 1e6;
    let flops = c.flops as f64 / 1e9;
    let detail = format!("{params:.2}M params, {flops:.2}G FLOPs");
    ensure!((params - 85.7).abs() <= 0.01 * 85.7 && (flops - 16.9).abs() <= 0.01 * 16.9, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- 11

fn quick(dir: &std::path::Path) -> TrainConfig {
    let mut c = TrainConfig::desk();
    c.data.source = DataSource::Synth {
        spec: SynthSpec {
            n_samples: 96,
            ..SynthSpec::default()
        },
        test_samples: 30,
    };
    c.data.budget = LabelBudget::Fraction(0.25);
    c.pretrain.epochs = 2;
    c.pretrain.warmup_epochs = 1;
    c.supervised.epochs = 2;
    c.supervised.warmup_epochs = 1;
    c.supervised.small_label_factor = 1;
    c.semisup.epochs = 2;
    c.semisup.warmup_epochs = 1;
    c.output_dir = dir.to_path_buf();
    c
}

fn criterion_11() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let files = [
        "pretrain_loss.csv",
        "supervised_history.csv",
        "semisup_history.csv",
        "eval/confusion.csv",
    ];
    let mut runs = Vec::new();
    for run in ["a", "b"] {
        let cfg = quick(&dir.path().join(run));
        run_pipeline(&cfg, &PipelineOptions::default()).map_err(err)?;
        let bytes = files
            .iter()
            .map(|f| std::fs::read(cfg.output_dir.join(f)).map_err(|e| format!("{f}: {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        runs.push(bytes);
    }
    for (f, (a, b)) in files.iter().zip(runs[0].iter().zip(&runs[1])) {
        ensure!(a == b, "{f} differs between identical runs");
    }
    Ok(format!("{} CSVs byte-identical", files.len()))
}

// ----------------------------------------------------------------

fn selected() -> Option<Vec<usize>> {
    let v = std::env::var("SSFER_ACCEPTANCE").ok()?;
    Some(v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

fn report(id: usize, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let mut outcome = f();
    let took = start.elapsed();
    if let (Ok(detail), Some(limit)) = (&outcome, limit) {
        if took > limit {
            outcome = Err(format!("{detail}; took {took:.1?}, limit {limit:?}"));
        }
    }
    match &outcome {
        Ok(detail) => println!("PASS criterion {id:>2} {name}: {detail} [{took:.1?}]"),
        Err(detail) => println!("FAIL criterion {id:>2} {name}: {detail} [{took:.1?}]"),
    }
    outcome.is_ok()
}

fn main() -> ExitCode {
    let only = selected();
    let want = |id: usize| only.as_ref().is_none_or(|v| v.contains(&id));
    let min = |m: u64| Some(Duration::from_secs(60 * m));
    let mut ok = true;
    if want(1) {
        ok &= report(1, "equation unit suite", min(1), criterion_1);
    }
    if want(2) {
        ok &= report(2, "gradient correctness", min(5), criterion_2);
    }
    if want(3) {
        ok &= report(3, "iou oracle", None, criterion_3);
    }
    if want(4) {
        ok &= report(4, "pretraining efficacy", min(10), criterion_4);
    }
    if want(5) || want(6) {
        let start = Instant::now();
        let cfg = desk();
        let studies: Result<Vec<SeedStudy>, String> =
            (0..5).map(|i| seed_study(&cfg, cfg.seed + i).map_err(err)).collect();
        let took = start.elapsed();
        let limit = Duration::from_secs(3600);
        let timed = |c: Check| match c {
            Ok(d) if took > limit => Err(format!("{d}; seed studies took {took:.1?}, limit {limit:?}")),
            Ok(d) => Ok(format!("{d}; seed studies {took:.1?}")),
            c => c,
        };
        match &studies {
            Ok(s) => {
                for st in s {
                    println!(
                        "       seed {}: baseline {:.4} facemix {:.4} ema {:.4} full {:.4} fixmatch {:.4}",
                        st.seed, st.baseline, st.facemix, st.ema, st.both, st.fixmatch
                    );
                }
            }
            Err(e) => println!("       seed study failed: {e}"),
        }
        if want(5) {
            ok &= report(5, "pipeline ordering", None, || timed(studies.clone().and_then(|s| criterion_5(&s))));
        }
        if want(6) {
            ok &= report(6, "ema-teacher vs fixmatch", None, || timed(studies.clone().and_then(|s| criterion_6(&s))));
        }
    }
    if want(7) {
        ok &= report(7, "attack asymmetry", None, criterion_7);
    }
    if want(8) {
        ok &= report(8, "label-noise monotonicity", None, criterion_8);
    }
    if want(9) {
        ok &= report(9, "grey wolf optimizer", Some(Duration::from_secs(10)), criterion_9);
    }
    if want(10) {
        ok &= report(10, "param and flop accounting", None, criterion_10);
    }
    if want(11) {
        ok &= report(11, "reproducibility", None, criterion_11);
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
