use rayon::prelude::*;

use super::{patchify, unpatchify, BlockParams, MaskPattern, ModelGrads, ModelState, ParamId};
use crate::autodiff::{softmax_in_place, Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Matrix;

/// A tape bound to one model instance. Parameters enter the tape lazily and
/// only require gradients when the graph is `trainable`.
pub struct Graph<'p> {
    pub tape: Tape<'p>,
    state: &'p ModelState,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'p> Graph<'p> {
    pub fn new(state: &'p ModelState, trainable: bool) -> Self {
        Self {
            tape: Tape::new(),
            state,
            bound: vec![None; state.params.len()],
            trainable,
        }
    }

    pub fn state(&self) -> &'p ModelState {
        self.state
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.borrowed(&self.state.params[id.0].value, self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Adds `weight · ∂root/∂θ` for every parameter reached by `grads`.
    pub fn accumulate(&self, grads: &Grads, acc: &mut ModelGrads, weight: f64) {
        for (i, b) in self.bound.iter().enumerate() {
            if let Some(g) = b.and_then(|v| grads.get(v)) {
                acc.tensors[i].add_scaled(g, weight);
            }
        }
    }

    /// Number of parameters with a gradient in `grads`.
    pub fn params_with_grad(&self, grads: &Grads) -> usize {
        self.bound.iter().filter(|b| b.is_some_and(|v| grads.get(v).is_some())).count()
    }

    fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let (w, b) = (self.param(w), self.param(b));
        let y = self.tape.matmul(x, w);
        self.tape.add_row(y, b)
    }

    fn norm(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let (w, b) = (self.param(w), self.param(b));
        self.tape.layer_norm(x, w, b)
    }

    /// One pre-norm transformer block over a stack of sequences; `segs`
    /// lists `(first_row, len)` of each sequence.
    fn block(&mut self, x: Var, p: &BlockParams, heads: usize, segs: &[(usize, usize)]) -> Var {
        let d = self.tape.value(x).cols;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let h = self.norm(x, p.norm1_w, p.norm1_b);
        let qkv = self.linear(h, p.qkv_w, p.qkv_b);
        let mut seg_out = Vec::with_capacity(segs.len());
        for &(r0, len) in segs {
            let mut outs = Vec::with_capacity(heads);
            for i in 0..heads {
                let q = self.tape.slice_block(qkv, r0, len, i * dh, dh);
                let k = self.tape.slice_block(qkv, r0, len, d + i * dh, dh);
                let v = self.tape.slice_block(qkv, r0, len, 2 * d + i * dh, dh);
                let s = self.tape.matmul_nt(q, k);
                let s = self.tape.scale(s, scale);
                let a = self.tape.softmax_rows(s);
                outs.push(self.tape.matmul(a, v));
            }
            seg_out.push(if heads == 1 { outs[0] } else { self.tape.concat_cols(&outs) });
        }
        let cat = if seg_out.len() == 1 { seg_out[0] } else { self.tape.concat_rows(&seg_out) };
        let attn = self.linear(cat, p.proj_w, p.proj_b);
        let x = self.tape.add(x, attn);
        let h = self.norm(x, p.norm2_w, p.norm2_b);
        let m = self.linear(h, p.fc1_w, p.fc1_b);
        let m = self.tape.gelu(m);
        let m = self.linear(m, p.fc2_w, p.fc2_b);
        self.tape.add(x, m)
    }

    fn stack(&mut self, parts: &[Var]) -> Var {
        if parts.len() == 1 {
            parts[0]
        } else {
            self.tape.concat_rows(parts)
        }
    }

    /// Encodes several samples at once. Returns the normalized token stack
    /// and the `(first_row, len)` of each sample; a sample's first row is
    /// its class token. `indices[b][i]` is the original position of row `i`
    /// of `patches[b]`.
    pub fn encoder_forward_batch(
        &mut self,
        patches: &[Var],
        indices: &[&[usize]],
    ) -> Result<(Var, Vec<(usize, usize)>)> {
        let state = self.state;
        let c = &state.config;
        if patches.is_empty() || patches.len() != indices.len() {
            return Err(Error::Shape(format!(
                "{} patch matrices with {} index lists",
                patches.len(),
                indices.len()
            )));
        }
        for (&p, idx) in patches.iter().zip(indices) {
            let (rows, cols) = self.tape.value(p).shape();
            if rows != idx.len() || cols != c.patch_len() {
                return Err(Error::Shape(format!(
                    "{rows}x{cols} patches with {} indices, patch length {}",
                    idx.len(),
                    c.patch_len()
                )));
            }
            if let Some(&i) = idx.iter().find(|&&i| i >= c.n_patches()) {
                return Err(Error::Shape(format!("patch index {i} beyond {}", c.n_patches())));
            }
        }
        let l = &state.layout;
        let stacked = self.stack(patches);
        let tokens = self.linear(stacked, l.patch_w, l.patch_b);
        let pos = self.param(l.pos_embed);
        let shifted: Vec<usize> = indices.iter().flat_map(|idx| idx.iter().map(|i| i + 1)).collect();
        let pos_tok = self.tape.gather_rows(pos, &shifted);
        let tokens = self.tape.add(tokens, pos_tok);
        let pos_cls = self.tape.gather_rows(pos, &[0]);
        let cls = self.param(l.cls_token);
        let cls = self.tape.add(cls, pos_cls);
        let pool = self.tape.concat_rows(&[cls, tokens]);
        let mut order = Vec::with_capacity(shifted.len() + indices.len());
        let mut segs = Vec::with_capacity(indices.len());
        let mut off = 1;
        for idx in indices {
            segs.push((order.len(), idx.len() + 1));
            order.push(0);
            order.extend(off..off + idx.len());
            off += idx.len();
        }
        let mut x = self.tape.gather_rows(pool, &order);
        for b in &l.blocks {
            x = self.block(x, b, c.heads, &segs);
        }
        Ok((self.norm(x, l.norm_w, l.norm_b), segs))
    }

    /// Class token followed by one token per patch row, after the final
    /// norm.
    pub fn encoder_forward(&mut self, patches: Var, indices: &[usize]) -> Result<Var> {
        Ok(self.encoder_forward_batch(&[patches], &[indices])?.0)
    }

    /// Patch tokens of every sample, class tokens dropped, stacked in
    /// sample order.
    pub fn encode_batch(&mut self, patches: &[Var], indices: &[&[usize]]) -> Result<Var> {
        let (x, segs) = self.encoder_forward_batch(patches, indices)?;
        let rows: Vec<usize> = segs.iter().flat_map(|&(r0, len)| r0 + 1..r0 + len).collect();
        Ok(self.tape.gather_rows(x, &rows))
    }

    /// Patch tokens only, `[n × embed_dim]`.
    pub fn encode(&mut self, patches: Var, indices: &[usize]) -> Result<Var> {
        self.encode_batch(&[patches], &[indices])
    }

    /// Predicts every patch of every sample from its visible tokens (in
    /// `mask.visible` order, stacked by sample) and mask tokens at the masked
    /// positions. Output row `b·N_p + i` is patch `i` of sample `b`.
    pub fn decode_batch(&mut self, tokens: Var, masks: &[&MaskPattern]) -> Result<Var> {
        let state = self.state;
        let c = &state.config;
        let l = &state.layout;
        let n = c.n_patches();
        let n_vis = self.tape.value(tokens).rows;
        let expected: usize = masks.iter().map(|m| m.visible.len()).sum();
        if masks.is_empty() || n_vis != expected || masks.iter().any(|m| m.n_patches != n) {
            return Err(Error::Shape(format!(
                "{n_vis} encoder tokens for {expected} visible patches across {} masks of {n}",
                masks.len()
            )));
        }
        let y = self.linear(tokens, l.dec_embed_w, l.dec_embed_b);
        let mt = self.param(l.mask_token);
        let pool = self.tape.concat_rows(&[y, mt]);
        let mut index = Vec::with_capacity(masks.len() * n);
        let mut off = 0;
        for m in masks {
            let start = index.len();
            index.resize(start + n, n_vis);
            for (slot, &p) in m.visible.iter().enumerate() {
                index[start + p] = off + slot;
            }
            off += m.visible.len();
        }
        let full = self.tape.gather_rows(pool, &index);
        let pos = self.param(l.dec_pos_embed);
        let pos = if masks.len() == 1 {
            pos
        } else {
            let rep: Vec<usize> = (0..masks.len()).flat_map(|_| 0..n).collect();
            self.tape.gather_rows(pos, &rep)
        };
        let mut x = self.tape.add(full, pos);
        let segs: Vec<(usize, usize)> = (0..masks.len()).map(|b| (b * n, n)).collect();
        for b in &l.dec_blocks {
            x = self.block(x, b, c.decoder_heads, &segs);
        }
        let x = self.norm(x, l.dec_norm_w, l.dec_norm_b);
        Ok(self.linear(x, l.dec_pred_w, l.dec_pred_b))
    }

    /// Predicts every patch from the visible tokens of one sample.
    pub fn decode(&mut self, tokens: Var, mask: &MaskPattern) -> Result<Var> {
        self.decode_batch(tokens, &[mask])
    }

    /// `[B × C]` logits from the class tokens of full patch matrices.
    pub fn classify_logits_batch(&mut self, patches: &[Var]) -> Result<Var> {
        let all: Vec<usize> = (0..self.state.config.n_patches()).collect();
        let indices: Vec<&[usize]> = patches.iter().map(|_| all.as_slice()).collect();
        let (x, segs) = self.encoder_forward_batch(patches, &indices)?;
        let rows: Vec<usize> = segs.iter().map(|s| s.0).collect();
        let cls = self.tape.gather_rows(x, &rows);
        let l = &self.state.layout;
        let (w, b) = (l.head_w, l.head_b);
        Ok(self.linear(cls, w, b))
    }

    /// `[1 × C]` logits for one full patch matrix.
    pub fn classify_logits(&mut self, patches: Var) -> Result<Var> {
        self.classify_logits_batch(&[patches])
    }

    /// Patchifies `image` onto the tape, checking it against the config.
    pub fn image_patches(&mut self, image: &Image, requires_grad: bool) -> Result<Var> {
        let c = &self.state.config;
        if image.height != c.image_size || image.width != c.image_size || image.channels != c.channels {
            return Err(Error::Shape(format!(
                "{}x{}x{} image for a {}x{}x{} model",
                image.height, image.width, image.channels, c.image_size, c.image_size, c.channels
            )));
        }
        let m = patchify(image, c.patch_size)?;
        Ok(self.tape.leaf(m, requires_grad))
    }
}

pub fn classify(state: &ModelState, image: &Image) -> Result<Vec<f64>> {
    let mut g = Graph::new(state, false);
    let p = g.image_patches(image, false)?;
    let logits = g.classify_logits(p)?;
    Ok(g.tape.value(logits).data.clone())
}

/// Logits per image, evaluated in parallel over fixed-size chunks.
pub fn classify_batch(state: &ModelState, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
    let chunks = images
        .par_chunks(crate::optim::CHUNK)
        .map(|chunk| {
            let mut g = Graph::new(state, false);
            let patches = chunk
                .iter()
                .map(|im| g.image_patches(im, false))
                .collect::<Result<Vec<_>>>()?;
            let logits = g.classify_logits_batch(&patches)?;
            let lv = g.tape.value(logits);
            Ok((0..lv.rows).map(|r| lv.row(r).to_vec()).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

pub fn predict_proba(state: &ModelState, image: &Image) -> Result<Vec<f64>> {
    let mut p = classify(state, image)?;
    softmax_in_place(&mut p);
    Ok(p)
}

/// Cross-entropy against `label` and its gradient w.r.t. the input pixels.
pub fn input_gradient(state: &ModelState, image: &Image, label: usize) -> Result<(f64, Image)> {
    let c = &state.config;
    if label >= c.class_count {
        return Err(Error::Config(format!("label {label} outside {} classes", c.class_count)));
    }
    let mut g = Graph::new(state, false);
    let p = g.image_patches(image, true)?;
    let logits = g.classify_logits(p)?;
    let loss = g.tape.cross_entropy(logits, label);
    let mut grads = g.tape.backward(loss, 1.0);
    let gp = grads.take(p).unwrap_or_else(|| Matrix::zeros(c.n_patches(), c.patch_len()));
    let img = unpatchify(&gp, c.patch_size, c.image_size, c.image_size, c.channels)?;
    Ok((g.tape.value(loss).item(), img))
}

#[cfg(test)]
mod tests {
    use rand::seq::SliceRandom;
    use rand::Rng as _;

    use super::super::{sample_mask, ModelConfig};
    use super::*;
    use crate::rng;

    fn random_image(c: &ModelConfig, seed: u64) -> Image {
        let mut r = rng::rng(seed);
        let n = c.image_size * c.image_size * c.channels;
        Image::from_vec(c.image_size, c.image_size, c.channels, (0..n).map(|_| r.random()).collect()).unwrap()
    }

    fn small() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            embed_dim: 16,
            depth: 2,
            heads: 2,
            decoder_embed_dim: 8,
            decoder_depth: 1,
            decoder_heads: 2,
            ..ModelConfig::tiny()
        }
    }

    #[test]
    fn output_shapes() {
        let c = ModelConfig::tiny();
        let s = ModelState::new(&c, 0).unwrap();
        let img = random_image(&c, 1);
        let mask = sample_mask(c.n_patches(), c.mask_ratio, 2);
        let mut g = Graph::new(&s, false);
        let p = g.image_patches(&img, false).unwrap();
        let vis = g.tape.gather_rows(p, &mask.visible);
        let enc = g.encode(vis, &mask.visible).unwrap();
        assert_eq!(g.tape.value(enc).shape(), (16, 64));
        let pred = g.decode(enc, &mask).unwrap();
        assert_eq!(g.tape.value(pred).shape(), (64, 48));
        let logits = classify(&s, &img).unwrap();
        assert_eq!(logits.len(), 3);
        let p = predict_proba(&s, &img).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(classify(&s, &Image::new(16, 16, 3)).is_err());
    }

    #[test]
    fn zero_head_gives_uniform_softmax() {
        let c = small();
        let mut s = ModelState::new(&c, 0).unwrap();
        s.zero_head();
        for seed in 0..3 {
            let p = predict_proba(&s, &random_image(&c, seed)).unwrap();
            assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn duplicate_images_in_batch_agree() {
        let c = small();
        let s = ModelState::new(&c, 0).unwrap();
        let (a, b) = (random_image(&c, 1), random_image(&c, 2));
        let out = classify_batch(&s, &[&a, &b, &a]).unwrap();
        assert_eq!(out[0], out[2]);
        assert_ne!(out[0], out[1]);
        let single = classify(&s, &b).unwrap();
        for (x, y) in out[1].iter().zip(&single) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let c = small();
        let s = ModelState::new(&c, 3).unwrap();
        let patches = patchify(&random_image(&c, 4), c.patch_size).unwrap();
        let idx: Vec<usize> = vec![0, 3, 5, 6, 9, 12, 15];
        let mut perm: Vec<usize> = (0..idx.len()).collect();
        perm.shuffle(&mut rng::rng(5));
        let run = |order: &[usize]| {
            let mut g = Graph::new(&s, false);
            let rows: Vec<usize> = order.iter().map(|&k| idx[k]).collect();
            let full = g.tape.leaf(patches.clone(), false);
            let vis = g.tape.gather_rows(full, &rows);
            let e = g.encode(vis, &rows).unwrap();
            g.tape.value(e).clone()
        };
        let base = run(&(0..idx.len()).collect::<Vec<_>>());
        let permuted = run(&perm);
        for (i, &k) in perm.iter().enumerate() {
            for (a, b) in permuted.row(i).iter().zip(base.row(k)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stacked_samples_match_separate_graphs() {
        let c = small();
        let s = ModelState::new(&c, 9).unwrap();
        let imgs: Vec<Image> = (0..3).map(|k| random_image(&c, 20 + k)).collect();
        let masks: Vec<MaskPattern> = (0..3).map(|k| sample_mask(c.n_patches(), 0.5, k)).collect();
        let mut g = Graph::new(&s, false);
        let mut vis = Vec::new();
        for (im, m) in imgs.iter().zip(&masks) {
            let p = g.image_patches(im, false).unwrap();
            vis.push(g.tape.gather_rows(p, &m.visible));
        }
        let idx: Vec<&[usize]> = masks.iter().map(|m| m.visible.as_slice()).collect();
        let enc = g.encode_batch(&vis, &idx).unwrap();
        let mrefs: Vec<&MaskPattern> = masks.iter().collect();
        let pred = g.decode_batch(enc, &mrefs).unwrap();
        let stacked = g.tape.value(pred).clone();
        for (b, (im, m)) in imgs.iter().zip(&masks).enumerate() {
            let mut h = Graph::new(&s, false);
            let p = h.image_patches(im, false).unwrap();
            let v = h.tape.gather_rows(p, &m.visible);
            let e = h.encode(v, &m.visible).unwrap();
            let one = h.decode(e, m).unwrap();
            let one = h.tape.value(one);
            for r in 0..c.n_patches() {
                for (x, y) in one.row(r).iter().zip(stacked.row(b * c.n_patches() + r)) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn reconstruction_gradient_reaches_masked_targets_only() {
        let c = small();
        let s = ModelState::new(&c, 6).unwrap();
        let patches = patchify(&random_image(&c, 7), c.patch_size).unwrap();
        let mask = sample_mask(c.n_patches(), 0.75, 8);
        let mut g = Graph::new(&s, true);
        let full = g.tape.leaf(patches.clone(), false);
        let vis = g.tape.gather_rows(full, &mask.visible);
        let enc = g.encode(vis, &mask.visible).unwrap();
        let pred = g.decode(enc, &mask).unwrap();
        let target = g.tape.leaf(patches, true);
        let loss = g.tape.masked_mse(pred, target, &mask.masked);
        let grads = g.tape.backward(loss, 1.0);
        let gt = grads.get(target).unwrap();
        for &m in &mask.masked {
            assert!(gt.row(m).iter().any(|&v| v != 0.0));
        }
        for &v in &mask.visible {
            assert!(gt.row(v).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn frozen_graph_has_no_parameter_gradients() {
        let c = small();
        let s = ModelState::new(&c, 0).unwrap();
        let (_, gimg) = input_gradient(&s, &random_image(&c, 1), 1).unwrap();
        assert!(gimg.data.iter().any(|&v| v != 0.0));
        let mut g = Graph::new(&s, false);
        let p = g.image_patches(&random_image(&c, 1), false).unwrap();
        let l = g.classify_logits(p).unwrap();
        let loss = g.tape.cross_entropy(l, 0);
        let grads = g.tape.backward(loss, 1.0);
        assert_eq!(g.params_with_grad(&grads), 0);
    }

    fn ce_loss(s: &ModelState, img: &Image, label: usize) -> f64 {
        let mut g = Graph::new(s, false);
        let p = g.image_patches(img, false).unwrap();
        let l = g.classify_logits(p).unwrap();
        let loss = g.tape.cross_entropy(l, label);
        g.tape.value(loss).item()
    }

    /// Central differences on a random 1% of scalar parameters of the tiny
    /// model, 64-bit throughout.
    #[test]
    fn classifier_gradient_matches_finite_differences() {
        let c = ModelConfig::tiny();
        let mut s = ModelState::new(&c, 11).unwrap();
        let img = random_image(&c, 12);
        let mut g = Graph::new(&s, true);
        let p = g.image_patches(&img, false).unwrap();
        let l = g.classify_logits(p).unwrap();
        let loss = g.tape.cross_entropy(l, 2);
        let grads = g.tape.backward(loss, 1.0);
        let mut acc = ModelGrads::zeros(&s);
        g.accumulate(&grads, &mut acc, 1.0);
        drop(g);
        let total = s.num_classifier_params();
        let mut r = rng::rng(13);
        let classifier: Vec<usize> = (0..s.params.len())
            .filter(|&i| !s.params[i].name.starts_with("decoder."))
            .collect();
        let h = 1e-4;
        for _ in 0..total / 100 {
            let pi = classifier[r.random_range(0..classifier.len())];
            let k = r.random_range(0..s.params[pi].value.len());
            let orig = s.params[pi].value.data[k];
            s.params[pi].value.data[k] = orig + h;
            let up = ce_loss(&s, &img, 2);
            s.params[pi].value.data[k] = orig - h;
            let down = ce_loss(&s, &img, 2);
            s.params[pi].value.data[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = acc.tensors[pi].data[k];
            assert!(
                (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()) + 1e-8,
                "{}[{k}]: analytic {an} vs numeric {fd}",
                s.params[pi].name
            );
        }
    }
}
