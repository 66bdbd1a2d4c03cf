use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor, TensorError};

/// `(B, C, H, W)` → `(B, (H/p)(W/p), p·p·C)`.
///
/// Patches are ordered row-major over the grid; inside a token the layout is
/// row-major pixels with the channel index fastest.
pub fn patchify<F: Float>(z: &Tensor<F>, patch: usize) -> Result<Tensor<F>> {
    if z.rank() != 4 || patch == 0 || z.shape()[2] % patch != 0 || z.shape()[3] % patch != 0 {
        return Err(TensorError::Shape {
            op: "patchify",
            lhs: z.shape().to_vec(),
            rhs: vec![patch, patch],
        }
        .into());
    }
    let (b, c, h, w) = (z.shape()[0], z.shape()[1], z.shape()[2] / patch, z.shape()[3] / patch);
    Ok(z
        .reshape(&[b, c, h, patch, w, patch])?
        .permute(&[0, 2, 4, 3, 5, 1])?
        .reshape(&[b, h * w, patch * patch * c])?)
}

/// Exact inverse of [`patchify`] for a `channels × size × size` latent.
pub fn unpatchify<F: Float>(tokens: &Tensor<F>, channels: usize, size: usize, patch: usize) -> Result<Tensor<F>> {
    if patch == 0 || size % patch != 0 {
        return Err(Error::Config(format!("size {size} not divisible by patch {patch}")));
    }
    let g = size / patch;
    if tokens.rank() != 3 || tokens.shape()[1] != g * g || tokens.shape()[2] != patch * patch * channels {
        return Err(TensorError::Shape {
            op: "unpatchify",
            lhs: tokens.shape().to_vec(),
            rhs: vec![g * g, patch * patch * channels],
        }
        .into());
    }
    let b = tokens.shape()[0];
    Ok(tokens
        .reshape(&[b, g, g, patch, patch, channels])?
        .permute(&[0, 5, 1, 3, 2, 4])?
        .reshape(&[b, channels, size, size])?)
}
