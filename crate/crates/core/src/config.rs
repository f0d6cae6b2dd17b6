//! Run configuration: one JSON document holding every stage's settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{load_manifest, synth_generate, BoxProvider, ImageSample, LabelBudget, SynthSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pretrain::PretrainConfig;
use crate::semisup::SemiSupConfig;
use crate::supervised::SupervisedConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated faces: `spec.n_samples` for training, then `test_samples`
    /// more from the same generator for testing.
    Synth { spec: SynthSpec, test_samples: usize },
    /// Manifest files; relative paths resolve against the config file.
    Manifest { train: PathBuf, test: PathBuf },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BoxSource {
    #[default]
    Stored,
    FullImage,
    Sidecar(PathBuf),
}

impl BoxSource {
    pub fn provider(&self) -> Result<BoxProvider> {
        match self {
            BoxSource::Stored => Ok(BoxProvider::Stored),
            BoxSource::FullImage => Ok(BoxProvider::FullImage),
            BoxSource::Sidecar(p) => BoxProvider::from_sidecar(p),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub budget: LabelBudget,
    #[serde(default)]
    pub noise_ratio: f64,
    #[serde(default)]
    pub boxes: BoxSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub supervised: SupervisedConfig,
    #[serde(default)]
    pub semisup: SemiSupConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl TrainConfig {
    /// ViT-Base with the published stage settings on generated data.
    pub fn reference() -> Self {
        Self {
            model: ModelConfig::vit_base(7),
            pretrain: PretrainConfig::default(),
            supervised: SupervisedConfig::default(),
            semisup: SemiSupConfig::default(),
            data: DataConfig {
                source: DataSource::Synth {
                    spec: SynthSpec {
                        n_samples: 2000,
                        class_count: 7,
                        image_size: 224,
                        jitter: 0.3,
                        seed: 0,
                    },
                    test_samples: 500,
                },
                budget: LabelBudget::Fraction(0.25),
                noise_ratio: 0.0,
                boxes: BoxSource::Stored,
            },
            seed: 0,
            output_dir: PathBuf::from("runs/reference"),
        }
    }

    /// The small configuration used for local experiments.
    pub fn desk() -> Self {
        let text = include_str!("../../../configs/desk.json");
        serde_json::from_str(text).expect("bundled desk config parses")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.supervised.validate()?;
        self.semisup.validate()?;
        if (self.model.mask_ratio - self.pretrain.mask_ratio).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "model.mask_ratio {} differs from pretrain.mask_ratio {}",
                self.model.mask_ratio, self.pretrain.mask_ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.data.noise_ratio) {
            return Err(Error::Config(format!("data.noise_ratio {} outside [0,1]", self.data.noise_ratio)));
        }
        match self.data.budget {
            LabelBudget::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
                return Err(Error::Config(format!("data.budget fraction {f} outside (0,1]")));
            }
            LabelBudget::PerClass(0) => return Err(Error::Config("data.budget per_class must be positive".into())),
            _ => {}
        }
        if let DataSource::Synth { spec, .. } = &self.data.source {
            spec.validate_for_patch(self.model.patch_size)?;
            if spec.image_size != self.model.image_size {
                return Err(Error::Config(format!(
                    "data.source.synth.spec.image_size {} differs from model.image_size {}",
                    spec.image_size, self.model.image_size
                )));
            }
            if spec.class_count != self.model.class_count {
                return Err(Error::Config(format!(
                    "data.source.synth.spec.class_count {} differs from model.class_count {}",
                    spec.class_count, self.model.class_count
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Parses and validates a config file. Relative data paths are resolved
/// against the file's directory.
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = parse_config(&text).map_err(|e| match e {
        Error::Json(j) => Error::Parse {
            path: path.to_path_buf(),
            message: format!("line {} column {}: {j}", j.line(), j.column()),
        },
        other => other,
    })?;
    let root = path.parent().unwrap_or_else(|| Path::new("."));
    let fix = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = root.join(&*p);
        }
    };
    if let DataSource::Manifest { train, test } = &mut cfg.data.source {
        fix(train);
        fix(test);
    }
    if let BoxSource::Sidecar(p) = &mut cfg.data.boxes {
        fix(p);
    }
    Ok(cfg)
}

pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let cfg: TrainConfig = serde_json::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Training and test samples named by the data source.
pub fn load_data(cfg: &DataConfig) -> Result<(Vec<ImageSample>, Vec<ImageSample>)> {
    match &cfg.source {
        DataSource::Synth { spec, test_samples } => {
            let all = synth_generate(&SynthSpec {
                n_samples: spec.n_samples + test_samples,
                ..spec.clone()
            })?;
            let test = all[spec.n_samples..].to_vec();
            let mut train = all;
            train.truncate(spec.n_samples);
            Ok((train, test))
        }
        DataSource::Manifest { train, test } => Ok((load_manifest(train)?, load_manifest(test)?)),
    }
}
