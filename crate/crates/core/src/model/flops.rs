use serde::Serialize;

use super::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamFlops {
    /// Encoder and classifier head.
    pub params: u64,
    /// Multiply-accumulates of the linear layers for one classification
    /// forward pass.
    pub flops: u64,
    pub decoder_params: u64,
}

fn block_params(d: u64, hidden: u64) -> u64 {
    4 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * hidden + hidden) + (hidden * d + d)
}

/// Closed-form parameter and FLOP counts for a configuration.
pub fn count_params_flops(c: &ModelConfig) -> ParamFlops {
    let d = c.embed_dim as u64;
    let dd = c.decoder_embed_dim as u64;
    let n = c.n_patches() as u64;
    let plen = c.patch_len() as u64;
    let classes = c.class_count as u64;
    let r = c.mlp_ratio as u64;
    let depth = c.depth as u64;
    let tokens = n + 1;
    let params = plen * d + d + d + tokens * d + depth * block_params(d, r * d) + 2 * d + d * classes + classes;
    let flops = n * plen * d + depth * tokens * (4 * d * d + 2 * d * r * d) + d * classes;
    let decoder_params = d * dd + dd + dd + n * dd + c.decoder_depth as u64 * block_params(dd, r * dd) + 2 * dd + dd * plen + plen;
    ParamFlops {
        params,
        flops,
        decoder_params,
    }
}
