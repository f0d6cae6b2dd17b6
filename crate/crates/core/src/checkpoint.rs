//! Checkpoints: a JSON manifest beside a flat little-endian `f32` blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};

pub const FORMAT: &str = "ssfer-checkpoint-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset into the blob, in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    pub config: ModelConfig,
    pub config_hash: String,
    pub stage: String,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<path>` (JSON) and `<path>` with a `.bin` extension.
pub fn save_checkpoint(
    path: &Path,
    state: &ModelState,
    stage: &str,
    epoch: usize,
    metrics: BTreeMap<String, f64>,
) -> Result<CheckpointMeta> {
    let blob = blob_path(path);
    let mut bytes = Vec::with_capacity(state.num_params() * 4);
    let mut tensors = Vec::with_capacity(state.params.len());
    let mut offset = 0;
    for p in &state.params {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            rows: p.value.rows,
            cols: p.value.cols,
            offset,
        });
        offset += p.value.len();
        for &v in &p.value.data {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let meta = CheckpointMeta {
        format: FORMAT.into(),
        config: state.config.clone(),
        config_hash: state.config.hash(),
        stage: stage.into(),
        epoch,
        metrics,
        blob: blob
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Config(format!("bad checkpoint path {}", path.display())))?
            .into(),
        tensors,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&blob, &bytes).map_err(|e| Error::io(&blob, e))?;
    let json = serde_json::to_string_pretty(&meta)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    Ok(meta)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelState, CheckpointMeta)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.into(),
        message: e.to_string(),
    })?;
    if meta.format != FORMAT {
        return Err(Error::Incompatible(format!("unknown format {}", meta.format)));
    }
    if meta.config_hash != meta.config.hash() {
        return Err(Error::Incompatible("config hash does not match stored config".into()));
    }
    let blob = path.with_file_name(&meta.blob);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    let mut state = ModelState::new(&meta.config, 0)?;
    if state.params.len() != meta.tensors.len() || bytes.len() != state.num_params() * 4 {
        return Err(Error::Incompatible(format!(
            "{} holds {} tensors / {} bytes, architecture needs {} / {}",
            path.display(),
            meta.tensors.len(),
            bytes.len(),
            state.params.len(),
            state.num_params() * 4
        )));
    }
    for (p, t) in state.params.iter_mut().zip(&meta.tensors) {
        if p.name != t.name || p.value.shape() != (t.rows, t.cols) {
            return Err(Error::Incompatible(format!("tensor {} does not match {}", t.name, p.name)));
        }
        let start = t.offset * 4;
        for (k, v) in p.value.data.iter_mut().enumerate() {
            let b = &bytes[start + 4 * k..start + 4 * k + 4];
            *v = f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        }
    }
    Ok((state, meta))
}

/// Fails unless `state` was built for `expected`.
pub fn ensure_compatible(meta: &CheckpointMeta, expected: &ModelConfig) -> Result<()> {
    if meta.config_hash != expected.hash() {
        return Err(Error::Incompatible(format!(
            "checkpoint from stage {} has config hash {}, expected {}",
            meta.stage,
            meta.config_hash,
            expected.hash()
        )));
    }
    Ok(())
}
