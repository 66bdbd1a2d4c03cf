use super::config::ModelConfig;
use super::denoiser::check_latent;
use super::layers::{attention, linear, mlp, sincos_2d, NORM_EPS};
use super::params::Bound;
use super::patch::patchify;
use crate::error::{Error, Result};
use crate::tensor::{layer_norm, Float, Tensor};

/// `r = f_φ(z0)`: ViT over the latent, mean-pooled and projected to
/// `(batch, repr_dim)`.
pub fn encode_representation<F: Float>(p: &Bound<F>, cfg: &ModelConfig, z0: &Tensor<F>) -> Result<Tensor<F>> {
    check_latent(cfg, z0, "encode_representation")?;
    if !p.contains("enc.head.weight") {
        return Err(Error::Config("model has no representation encoder".into()));
    }
    let norm = |x: &Tensor<F>, name: &str| -> Result<Tensor<F>> {
        Ok(layer_norm(
            x,
            Some(p.get(&format!("{name}.gain"))?),
            Some(p.get(&format!("{name}.bias"))?),
            NORM_EPS,
        )?)
    };
    let pos = sincos_2d::<F>(cfg.grid(), cfg.encoder_hidden)?;
    let mut x = linear(p, "enc.x_embed", &patchify(z0, cfg.patch_size)?)?.add(&pos)?;
    for i in 0..cfg.encoder_blocks {
        let prefix = format!("enc.blocks.{i}");
        let h = attention(p, &format!("{prefix}.attn"), &norm(&x, &format!("{prefix}.norm1"))?, cfg.heads)?;
        x = x.add(&h)?;
        let h = mlp(p, &format!("{prefix}.mlp"), &norm(&x, &format!("{prefix}.norm2"))?)?;
        x = x.add(&h)?;
    }
    let pooled = norm(&x, "enc.norm")?.mean_axis(1)?;
    linear(p, "enc.head", &pooled)
}
