use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Matrix;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    /// Weight matrices decay; biases, norms, embeddings and tokens do not.
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub norm1_w: ParamId,
    pub norm1_b: ParamId,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub norm2_w: ParamId,
    pub norm2_b: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<BlockParams>,
    pub norm_w: ParamId,
    pub norm_b: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub dec_embed_w: ParamId,
    pub dec_embed_b: ParamId,
    pub mask_token: ParamId,
    pub dec_pos_embed: ParamId,
    pub dec_blocks: Vec<BlockParams>,
    pub dec_norm_w: ParamId,
    pub dec_norm_b: ParamId,
    pub dec_pred_w: ParamId,
    pub dec_pred_b: ParamId,
}

enum Init {
    Normal,
    Xavier,
    Zeros,
    Ones,
}

struct Builder {
    params: Vec<Param>,
    rng: rng::Rng,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init, decay: bool) -> ParamId {
        let value = match init {
            Init::Zeros => Matrix::zeros(rows, cols),
            Init::Ones => Matrix::filled(rows, cols, 1.0),
            Init::Xavier => {
                let a = (6.0 / (rows + cols) as f64).sqrt();
                let data = (0..rows * cols).map(|_| self.rng.random_range(-a..a)).collect();
                Matrix::from_vec(rows, cols, data).expect("sized")
            }
            Init::Normal => {
                let n = Normal::new(0.0, INIT_STD).expect("valid std");
                let data = (0..rows * cols)
                    .map(|_| loop {
                        let v: f64 = n.sample(&mut self.rng);
                        if v.abs() <= 2.0 * INIT_STD {
                            break v;
                        }
                    })
                    .collect();
                Matrix::from_vec(rows, cols, data).expect("sized")
            }
        };
        self.params.push(Param { name, value, decay });
        ParamId(self.params.len() - 1)
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> (ParamId, ParamId) {
        (
            self.add(format!("{prefix}.weight"), fan_in, fan_out, Init::Xavier, true),
            self.add(format!("{prefix}.bias"), 1, fan_out, Init::Zeros, false),
        )
    }

    fn norm(&mut self, prefix: &str, d: usize) -> (ParamId, ParamId) {
        (
            self.add(format!("{prefix}.weight"), 1, d, Init::Ones, false),
            self.add(format!("{prefix}.bias"), 1, d, Init::Zeros, false),
        )
    }

    fn block(&mut self, prefix: &str, d: usize, hidden: usize) -> BlockParams {
        let (norm1_w, norm1_b) = self.norm(&format!("{prefix}.norm1"), d);
        let (qkv_w, qkv_b) = self.linear(&format!("{prefix}.attn.qkv"), d, 3 * d);
        let (proj_w, proj_b) = self.linear(&format!("{prefix}.attn.proj"), d, d);
        let (norm2_w, norm2_b) = self.norm(&format!("{prefix}.norm2"), d);
        let (fc1_w, fc1_b) = self.linear(&format!("{prefix}.mlp.fc1"), d, hidden);
        let (fc2_w, fc2_b) = self.linear(&format!("{prefix}.mlp.fc2"), hidden, d);
        BlockParams {
            norm1_w,
            norm1_b,
            qkv_w,
            qkv_b,
            proj_w,
            proj_b,
            norm2_w,
            norm2_b,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
        }
    }
}

/// Named parameter tensors of one model instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Vec<Param>,
    pub layout: Layout,
}

impl ModelState {
    /// Xavier-uniform linear weights; truncated-normal (σ = 0.02, cut at
    /// 2σ) class token and position embeddings; zero biases and mask token;
    /// unit norm gains.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let (d, dd) = (c.embed_dim, c.decoder_embed_dim);
        let (n, plen) = (c.n_patches(), c.patch_len());
        let mut b = Builder {
            params: Vec::new(),
            rng: rng::rng(rng::derive(seed, "init")),
        };
        let (patch_w, patch_b) = b.linear("encoder.patch_embed", plen, d);
        let cls_token = b.add("encoder.cls_token".into(), 1, d, Init::Normal, false);
        let pos_embed = b.add("encoder.pos_embed".into(), n + 1, d, Init::Normal, false);
        let blocks = (0..c.depth)
            .map(|i| b.block(&format!("encoder.blocks.{i}"), d, d * c.mlp_ratio))
            .collect();
        let (norm_w, norm_b) = b.norm("encoder.norm", d);
        let (head_w, head_b) = b.linear("head", d, c.class_count);
        let (dec_embed_w, dec_embed_b) = b.linear("decoder.embed", d, dd);
        let mask_token = b.add("decoder.mask_token".into(), 1, dd, Init::Zeros, false);
        let dec_pos_embed = b.add("decoder.pos_embed".into(), n, dd, Init::Normal, false);
        let dec_blocks = (0..c.decoder_depth)
            .map(|i| b.block(&format!("decoder.blocks.{i}"), dd, dd * c.mlp_ratio))
            .collect();
        let (dec_norm_w, dec_norm_b) = b.norm("decoder.norm", dd);
        let (dec_pred_w, dec_pred_b) = b.linear("decoder.pred", dd, plen);
        Ok(Self {
            config: config.clone(),
            params: b.params,
            layout: Layout {
                patch_w,
                patch_b,
                cls_token,
                pos_embed,
                blocks,
                norm_w,
                norm_b,
                head_w,
                head_b,
                dec_embed_w,
                dec_embed_b,
                mask_token,
                dec_pos_embed,
                dec_blocks,
                dec_norm_w,
                dec_norm_b,
                dec_pred_w,
                dec_pred_b,
            },
        })
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Parameters used by classification (encoder and head).
    pub fn num_classifier_params(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with("encoder.") || p.name.starts_with("head."))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_head(&mut self) {
        let (w, b) = (self.layout.head_w, self.layout.head_b);
        *self.get_mut(w) = Matrix::zeros(self.get(w).rows, self.get(w).cols);
        *self.get_mut(b) = Matrix::zeros(1, self.config.class_count);
    }

    /// Name of the first non-finite tensor, if any.
    pub fn non_finite(&self) -> Option<&str> {
        self.params.iter().find(|p| !p.value.is_finite()).map(|p| p.name.as_str())
    }

    /// Overwrites tensors from `other`, which must share this architecture.
    pub fn copy_from(&mut self, other: &ModelState) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.value.data.copy_from_slice(&b.value.data);
        }
        Ok(())
    }

    pub fn check_compatible(&self, other: &ModelState) -> Result<()> {
        let same = self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
        if !same {
            return Err(Error::Shape("model states have different parameter layouts".into()));
        }
        Ok(())
    }
}

/// One gradient tensor per parameter, in the state's order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub tensors: Vec<Matrix>,
}

impl ModelGrads {
    pub fn zeros(state: &ModelState) -> Self {
        Self {
            tensors: state
                .params
                .iter()
                .map(|p| Matrix::zeros(p.value.rows, p.value.cols))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0]
    }

    pub fn add_scaled(&mut self, other: &ModelGrads, s: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_scaled(b, s);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v *= s;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| &t.data)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}
