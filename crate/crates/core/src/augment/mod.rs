//! Weak/strong views, Mixup-style mixing, face-box IoU and the κ weight.

mod mix;
mod policy;
mod similarity;

pub use mix::{iou, kappa, mix_images, sample_lambda, KappaMetric, MixPair};
pub use policy::{apply_augment, AugmentKind, AugmentPolicy, RandOp, RAND_OPS};
pub use similarity::{fsim, image_similarity, psnr, ssim, PSNR_CAP_DB};
