//! Blind grayscale image denoising with a multi-scale gated convolutional
//! network trained in three phases: clean-to-clean pretraining,
//! noisy-to-clean training, and adversarial fine-tuning against a
//! clean-vs-denoised discriminator.
//!
//! Everything runs on the CPU through a small reverse-mode autodiff tape
//! ([`tape`]) over dense `C x H x W` tensors ([`tensor`]).

// Validation uses `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod checkpoint;
pub mod data;
pub mod denoiser;
pub mod discriminator;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod training;

pub use checkpoint::{CheckpointMeta, ModelKind};
pub use data::ImagePatch;
pub use denoiser::{build_denoiser, DenoiserModel, LpConfig, MultiScaleConfig, SkipMode};
pub use discriminator::{build_discriminator, Discriminator, DiscriminatorConfig};
pub use error::{CheckpointError, Error, ImageError, Result};
pub use metrics::{evaluate_validation, psnr, Denoise, ValidationReport, VALIDATION_SIGMAS};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamGroup, ParamSet};
pub use tensor::{Real, Tensor};
pub use training::{LossSchedule, MetricsRecord, NoiseSpec, Phase, PhasePlan};
