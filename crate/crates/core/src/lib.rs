//! Representation-conditioned latent diffusion transformer, trained from
//! scratch on CPU, with Diffusion Classifier Zero for label-efficient
//! image classification.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense tensors with reverse-mode autodiff
//! - [`schedule`]: forward noising and the clean-latent inversion
//! - [`backbone`]: the DiT denoiser and the ViT representation encoder
//! - [`conditioning`]: timestep/class/representation conditioning vectors
//! - [`training`]: joint pretraining, fine-tuning, AdamW, checkpoints
//! - [`classifier`]: Diffusion Classifier Zero and the ε-space baseline
//! - [`sampler`]: ancestral sampling, partial denoising, z0 sweeps
//! - [`eval`]: classification metrics and Fréchet distance
//! - [`data`]: PGM datasets, splits and the synthetic blob-detection set

pub mod backbone;
pub mod classifier;
pub mod conditioning;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Array, Float, Precision, Tensor};
