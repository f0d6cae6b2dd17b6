//! Decoupled-weight-decay Adam, the warmup/cosine schedule and batched
//! gradient accumulation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::{Graph, ModelGrads, ModelState};
use crate::tensor::Matrix;

/// Items per gradient chunk. Fixed so that summation order, and therefore
/// every bit of the result, does not depend on the thread count.
pub(crate) const CHUNK: usize = 8;

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl AdamW {
    pub fn new(state: &ModelState, betas: (f64, f64), weight_decay: f64) -> Self {
        let zeros = || {
            state
                .params
                .iter()
                .map(|p| Matrix::zeros(p.value.rows, p.value.cols))
                .collect()
        };
        Self {
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update with learning rate `lr`; fails if any tensor turns
    /// non-finite.
    pub fn step(&mut self, state: &mut ModelState, grads: &ModelGrads, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in state.params.iter_mut().enumerate() {
            let g = &grads.tensors[i].data;
            let (m, v) = (&mut self.m[i].data, &mut self.v[i].data);
            let decay = if p.decay { lr * self.weight_decay } else { 0.0 };
            for (k, theta) in p.value.data.iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                *theta -= decay * *theta;
                *theta -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
            }
        }
        match state.non_finite() {
            Some(name) => Err(Error::NonFinite(name.to_string())),
            None => Ok(()),
        }
    }
}

/// Linear warmup from `warmup_init_lr` to `base_lr`, then half-cosine
/// decay to `min_lr` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub warmup_init_lr: f64,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            let f = step as f64 / self.warmup_steps as f64;
            return self.warmup_init_lr + (self.base_lr - self.warmup_init_lr) * f;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let f = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr + (self.base_lr - self.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * f).cos())
    }
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size.max(1))
}

/// Sum of per-item losses and of their parameter gradients. Items are
/// split into fixed-size chunks; `loss` builds the summed loss of one chunk
/// on a fresh trainable graph.
pub fn batch_gradients<T, F>(state: &ModelState, items: &[T], loss: F) -> Result<(f64, ModelGrads)>
where
    T: Sync,
    F: Fn(&mut Graph, &[T]) -> Result<Var> + Sync,
{
    let parts = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = ModelGrads::zeros(state);
            let mut g = Graph::new(state, true);
            let l = loss(&mut g, chunk)?;
            let total = g.tape.value(l).item();
            let grads = g.tape.backward(l, 1.0);
            g.accumulate(&grads, &mut acc, 1.0);
            Ok((total, acc))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc = ModelGrads::zeros(state);
    let mut total = 0.0;
    for (l, g) in parts {
        total += l;
        acc.add_scaled(&g, 1.0);
    }
    Ok((total, acc))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::image::Image;
    use crate::model::ModelConfig;

    fn small() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            decoder_embed_dim: 4,
            decoder_depth: 1,
            decoder_heads: 1,
            ..ModelConfig::tiny()
        }
    }

    #[test]
    fn adamw_matches_scalar_oracle() {
        let mut s = ModelState::new(&small(), 0).unwrap();
        let w = s.layout.patch_w;
        let b = s.layout.patch_b;
        let (w0, b0) = (s.get(w).data[0], s.get(b).data[0]);
        let mut opt = AdamW::new(&s, (0.9, 0.95), 0.05);
        let mut grads = ModelGrads::zeros(&s);
        let (lr, gs) = (0.01, [0.3, -0.1]);
        let (mut wt, mut bt, mut m, mut v) = (w0, b0, 0.0, 0.0);
        for (t, &g) in gs.iter().enumerate() {
            grads.tensors[w.0].data[0] = g;
            grads.tensors[b.0].data[0] = g;
            opt.step(&mut s, &grads, lr).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.95 * v + 0.05 * g * g;
            let upd = (m / (1.0 - 0.9f64.powi(t as i32 + 1)))
                / ((v / (1.0 - 0.95f64.powi(t as i32 + 1))).sqrt() + 1e-8);
            wt = wt - lr * 0.05 * wt - lr * upd;
            bt -= lr * upd;
        }
        assert!((s.get(w).data[0] - wt).abs() < 1e-15);
        assert!((s.get(b).data[0] - bt).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let mut s = ModelState::new(&small(), 0).unwrap();
        let mut opt = AdamW::new(&s, (0.9, 0.999), 0.0);
        let mut grads = ModelGrads::zeros(&s);
        grads.tensors[3].data[0] = f64::NAN;
        let err = opt.step(&mut s, &grads, 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref n) if *n == s.params[3].name));
    }

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule {
            warmup_init_lr: 5e-5,
            base_lr: 1e-4,
            min_lr: 1e-5,
            warmup_steps: 5,
            total_steps: 100,
        };
        assert_eq!(s.lr(0), 5e-5);
        assert!((s.lr(5) - 1e-4).abs() < 1e-18);
        assert!((s.lr(100) - 1e-5).abs() < 1e-18);
        assert!((s.lr(1000) - 1e-5).abs() < 1e-18);
    }

    proptest! {
        #[test]
        fn schedule_monotone_per_phase(warm in 0usize..50, extra in 1usize..200, base in 1e-5f64..1e-2, frac in 0.0f64..1.0) {
            let s = LrSchedule {
                warmup_init_lr: base * frac,
                base_lr: base,
                min_lr: base * frac * 0.5,
                warmup_steps: warm,
                total_steps: warm + extra,
            };
            for t in 1..=warm {
                prop_assert!(s.lr(t) >= s.lr(t - 1));
            }
            for t in warm + 1..=warm + extra {
                prop_assert!(s.lr(t) <= s.lr(t - 1));
                prop_assert!(s.lr(t) >= 0.0);
            }
        }
    }

    #[test]
    fn batch_gradients_do_not_depend_on_thread_count() {
        let c = small();
        let s = ModelState::new(&c, 1).unwrap();
        let images: Vec<(Image, usize)> = (0..21)
            .map(|i| (Image::filled(8, 8, 3, i as f64 / 21.0), i % 3))
            .collect();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| {
                    batch_gradients(&s, &images, |g, chunk| {
                        let patches = chunk
                            .iter()
                            .map(|(img, _)| g.image_patches(img, false))
                            .collect::<Result<Vec<_>>>()?;
                        let l = g.classify_logits_batch(&patches)?;
                        let mut t = vec![0.0; chunk.len() * 3];
                        for (k, (_, y)) in chunk.iter().enumerate() {
                            t[k * 3 + y] = 1.0;
                        }
                        Ok(g.tape.weighted_soft_ce(l, &t, &vec![1.0; chunk.len()]))
                    })
                    .unwrap()
                })
        };
        let (l1, g1) = run(1);
        let (l3, g3) = run(3);
        assert_eq!(l1.to_bits(), l3.to_bits());
        assert_eq!(g1, g3);
        assert!(g1.norm() > 0.0);
    }
}
