//! Denoising transformer `g_θ` and representation encoder `f_φ`.
//!
//! Both networks tokenize the latent with the same patch size, add fixed 2-D
//! sinusoidal positions, and run pre-norm transformer blocks. The denoiser's
//! blocks are modulated by a conditioning vector through adaLN-zero; the
//! encoder mean-pools its tokens and projects to `repr_dim`.

mod config;
mod denoiser;
mod encoder;
pub(crate) mod layers;
mod params;
mod patch;

pub use config::{ConditioningMode, LatentMapper, ModelConfig};
pub use denoiser::{denoise, dit_block, final_layer};
pub use encoder::encode_representation;
pub use params::{param_specs, Bound, Init, Model, ParamSet, ParamSpec, INIT_STD};
pub use patch::{patchify, unpatchify};
