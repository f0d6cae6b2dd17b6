//! Vision transformer encoder, classifier head and masked-reconstruction
//! decoder, plus patchify and masking.

mod flops;
mod patch;
mod state;
mod vit;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use flops::{count_params_flops, ParamFlops};
pub use patch::{patchify, sample_mask, unpatchify, MaskPattern};
pub use state::{BlockParams, Layout, ModelGrads, ModelState, Param, ParamId};
pub use vit::{classify, classify_batch, input_gradient, predict_proba, Graph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "three")]
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub decoder_embed_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub class_count: usize,
    pub mask_ratio: f64,
}

fn three() -> usize {
    3
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl ModelConfig {
    /// Image 32, patch 4, d=64, two blocks, decoder 32 wide and two deep.
    pub fn tiny() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            decoder_embed_dim: 32,
            decoder_depth: 2,
            decoder_heads: 4,
            class_count: 3,
            mask_ratio: 0.75,
        }
    }

    /// Small enough for repeated end-to-end runs on one core.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            embed_dim: 32,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            decoder_embed_dim: 24,
            decoder_depth: 1,
            decoder_heads: 2,
            class_count: 3,
            mask_ratio: 0.75,
        }
    }

    pub fn vit_base(class_count: usize) -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            decoder_embed_dim: 512,
            decoder_depth: 8,
            decoder_heads: 16,
            class_count,
            mask_ratio: 0.75,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.channels == 0 || self.depth == 0 || self.mlp_ratio == 0 {
            return bad("channels, depth and mlp_ratio must be positive".into());
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.decoder_heads == 0
            || self.decoder_embed_dim == 0
            || self.decoder_embed_dim % self.decoder_heads != 0
        {
            return bad(format!(
                "decoder_embed_dim {} not divisible by decoder_heads {}",
                self.decoder_embed_dim, self.decoder_heads
            ));
        }
        if self.class_count < 2 {
            return bad(format!("class_count {} < 2", self.class_count));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask_ratio {} outside (0,1)", self.mask_ratio));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Short digest of the architecture, used to check that chained stages
    /// agree. The mask ratio does not change any tensor and is left out.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let arch = Self {
            mask_ratio: 0.5,
            ..self.clone()
        };
        let json = serde_json::to_string(&arch).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}
