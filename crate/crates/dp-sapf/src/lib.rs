//! Saliency-aware parameter selection and LoRA fine-tuning under
//! differential privacy, on a desk-scale conditional diffusion model.
//!
//! The crate is organized as a pipeline:
//!
//! - [`accountant`]: Renyi-DP curves, composition, conversion to
//!   (epsilon, delta), budget-ratio reporting, noise calibration.
//! - [`autodiff`] / [`tensor`]: a small matrix-level reverse-mode tape
//!   producing exact per-sample gradients.
//! - [`denoiser`]: a toy class-conditional attention denoiser with
//!   forward diffusion, training loss, and ancestral sampling.
//! - [`saliency`]: the DP selection query over candidate weight
//!   matrices (matrix-wise, layer-wise, and random variants).
//! - [`lora`]: low-rank adapters for the selected matrices.
//! - [`trainer`]: DP-SGD fine-tuning with Poisson sampling, joint
//!   clipping, and fixed-normalizer noise.
//! - [`harness`]: synthetic datasets, public-model pretraining,
//!   experiment variants, sweeps, and metrics.
//!
//! See the `examples/` directory for one runnable walk-through per
//! capability, and the `dp-sapf` binary for the file-based CLI.

pub mod accountant;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod harness;
pub mod ids;
pub mod lora;
pub mod metrics;
pub mod report;
pub mod rng;
pub mod saliency;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
