//! Semi-supervised facial expression recognition with masked pretraining,
//! FaceMix fine-tuning and a teacher-student stage.

pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evalkit;
pub mod experiments;
pub mod hpo;
pub mod image;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod pretrain;
pub mod report;
pub mod rng;
pub mod semisup;
pub mod supervised;
pub mod tensor;

pub use error::{Error, Result};
