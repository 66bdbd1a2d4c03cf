use super::params::Bound;
use crate::error::Result;
use crate::tensor::{multi_head_attention, Float, Tensor};

pub(crate) const NORM_EPS: f64 = 1e-6;

/// `x · W + b` over the last axis.
pub(crate) fn linear<F: Float>(p: &Bound<F>, prefix: &str, x: &Tensor<F>) -> Result<Tensor<F>> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    Ok(x.matmul(w)?.add(b)?)
}

/// Multi-head self-attention over `(batch, tokens, width)`.
pub(crate) fn attention<F: Float>(p: &Bound<F>, prefix: &str, x: &Tensor<F>, heads: usize) -> Result<Tensor<F>> {
    let qkv = linear(p, &format!("{prefix}.qkv"), x)?;
    let out = multi_head_attention(&qkv, heads)?;
    linear(p, &format!("{prefix}.proj"), &out)
}

pub(crate) fn mlp<F: Float>(p: &Bound<F>, prefix: &str, x: &Tensor<F>) -> Result<Tensor<F>> {
    let h = linear(p, &format!("{prefix}.fc1"), x)?.gelu();
    linear(p, &format!("{prefix}.fc2"), &h)
}

/// `x * (1 + scale) + shift` with per-example `(batch, width)` modulation.
pub(crate) fn modulate<F: Float>(x: &Tensor<F>, shift: &Tensor<F>, scale: &Tensor<F>) -> Result<Tensor<F>> {
    let (b, d) = (shift.shape()[0], shift.shape()[1]);
    let shift = shift.reshape(&[b, 1, d])?;
    let scale = scale.reshape(&[b, 1, d])?.add_scalar(1.0);
    Ok(x.mul(&scale)?.add(&shift)?)
}

/// Fixed 2-D sine-cosine positions for a `grid × grid` token layout,
/// `(grid², dim)`. The first half of each row encodes the row index, the
/// second half the column index.
pub(crate) fn sincos_2d<F: Float>(grid: usize, dim: usize) -> Result<Tensor<F>> {
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut data = Vec::with_capacity(grid * grid * dim);
    for r in 0..grid {
        for c in 0..grid {
            for pos in [r as f64, c as f64] {
                data.extend(omega.iter().map(|w| F::from_f64((pos * w).sin())));
                data.extend(omega.iter().map(|w| F::from_f64((pos * w).cos())));
            }
        }
    }
    Ok(Tensor::new(&[grid * grid, dim], data)?)
}
