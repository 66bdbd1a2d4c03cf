use super::config::ModelConfig;
use super::layers::{attention, linear, mlp, modulate, sincos_2d, NORM_EPS};
use super::params::Bound;
use super::patch::{patchify, unpatchify};
use crate::conditioning::ConditioningVector;
use crate::error::{Error, Result};
use crate::tensor::{layer_norm, Float, Tensor, TensorError};

pub(crate) fn check_latent<F: Float>(cfg: &ModelConfig, z: &Tensor<F>, op: &'static str) -> Result<()> {
    let [c, h, w] = cfg.latent_shape();
    if z.rank() != 4 || z.shape()[1..] != [c, h, w] {
        return Err(TensorError::Shape {
            op,
            lhs: z.shape().to_vec(),
            rhs: vec![c, h, w],
        }
        .into());
    }
    Ok(())
}

/// Predicted noise `ε'` for `zt`, same shape as `zt`.
pub fn denoise<F: Float>(
    p: &Bound<F>,
    cfg: &ModelConfig,
    zt: &Tensor<F>,
    cond: &ConditioningVector<F>,
) -> Result<Tensor<F>> {
    check_latent(cfg, zt, "denoise")?;
    if cond.mode != cfg.conditioning {
        return Err(Error::Mode(format!(
            "denoiser configured for {} received a {} condition",
            cfg.conditioning, cond.mode
        )));
    }
    let batch = zt.shape()[0];
    if cond.c.shape() != [batch, cfg.hidden] {
        return Err(TensorError::Shape {
            op: "denoise",
            lhs: cond.c.shape().to_vec(),
            rhs: vec![batch, cfg.hidden],
        }
        .into());
    }
    let pos = sincos_2d::<F>(cfg.grid(), cfg.hidden)?;
    let mut x = linear(p, "x_embed", &patchify(zt, cfg.patch_size)?)?.add(&pos)?;
    let c = cond.c.silu()?;
    for i in 0..cfg.blocks {
        x = dit_block(p, cfg, i, &x, &c)?;
    }
    let tokens = final_layer(p, &x, &c)?;
    unpatchify(&tokens, cfg.image_channels, cfg.image_size, cfg.patch_size)
}

/// One adaLN-zero transformer block. `c` is the activated conditioning
/// vector `(batch, hidden)`.
pub fn dit_block<F: Float>(
    p: &Bound<F>,
    cfg: &ModelConfig,
    index: usize,
    x: &Tensor<F>,
    c: &Tensor<F>,
) -> Result<Tensor<F>> {
    let prefix = format!("blocks.{index}");
    let m = linear(p, &format!("{prefix}.ada"), c)?.chunk(6, 1)?;
    let (shift_msa, scale_msa, gate_msa) = (&m[0], &m[1], &m[2]);
    let (shift_mlp, scale_mlp, gate_mlp) = (&m[3], &m[4], &m[5]);
    let gate = |g: &Tensor<F>| g.reshape(&[g.shape()[0], 1, g.shape()[1]]);

    let h = modulate(&layer_norm(x, None, None, NORM_EPS)?, shift_msa, scale_msa)?;
    let h = attention(p, &format!("{prefix}.attn"), &h, cfg.heads)?;
    let x = x.add(&h.mul(&gate(gate_msa)?)?)?;

    let h = modulate(&layer_norm(&x, None, None, NORM_EPS)?, shift_mlp, scale_mlp)?;
    let h = mlp(p, &format!("{prefix}.mlp"), &h)?;
    Ok(x.add(&h.mul(&gate(gate_mlp)?)?)?)
}

/// Decode head: modulated norm, then a linear map to patch pixels.
pub fn final_layer<F: Float>(p: &Bound<F>, x: &Tensor<F>, c: &Tensor<F>) -> Result<Tensor<F>> {
    let m = linear(p, "final.ada", c)?.chunk(2, 1)?;
    let h = modulate(&layer_norm(x, None, None, NORM_EPS)?, &m[0], &m[1])?;
    linear(p, "final.linear", &h)
}
