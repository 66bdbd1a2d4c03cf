//! Conditioning vectors for the three denoiser modes, and the
//! pretrain → fine-tune conditioning swap.
//!
//! Every mode starts from the timestep embedding; class mode adds a row of
//! the class table, representation mode adds a linear projection of `r`.

use crate::backbone::{denoise, param_specs, Bound, ConditioningMode, ModelConfig};
use crate::backbone::layers::linear;
use crate::error::{Error, Result};
use crate::tensor::{embedding, Array, Float, Tensor, TensorError};
use crate::training::Checkpoint;

/// Conditioning input `c` of shape `(batch, hidden)`, tagged with its mode.
#[derive(Debug, Clone)]
pub struct ConditioningVector<F: Float> {
    pub c: Tensor<F>,
    pub mode: ConditioningMode,
}

/// Raw sinusoidal timestep features, `(batch, dim)`: the first half holds
/// `cos(t·ω_i)`, the second half `sin(t·ω_i)`, `ω_i = 10000^(−i/half)`.
pub fn timestep_features<F: Float>(ts: &[usize], dim: usize) -> Result<Tensor<F>> {
    let half = dim / 2;
    let omega: Vec<f64> = (0..half)
        .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let t = t as f64;
        data.extend(omega.iter().map(|w| F::from_f64((t * w).cos())));
        data.extend(omega.iter().map(|w| F::from_f64((t * w).sin())));
        if dim % 2 == 1 {
            data.push(F::zero());
        }
    }
    Ok(Tensor::new(&[ts.len(), dim], data)?)
}

/// Sinusoidal features followed by the two-layer timestep MLP.
pub fn embed_timestep<F: Float>(p: &Bound<F>, cfg: &ModelConfig, ts: &[usize]) -> Result<Tensor<F>> {
    if let Some(&t) = ts.iter().find(|&&t| t >= cfg.timesteps) {
        return Err(Error::Timestep {
            t,
            total: cfg.timesteps,
        });
    }
    let raw = timestep_features(ts, cfg.freq_dim())?;
    let h = linear(p, "t_embed.fc1", &raw)?.silu()?;
    linear(p, "t_embed.fc2", &h)
}

/// Combine the timestep embedding with the mode's extra input.
pub fn build_condition<F: Float>(
    p: &Bound<F>,
    mode: ConditioningMode,
    t_embed: &Tensor<F>,
    class_ids: Option<&[usize]>,
    r: Option<&Tensor<F>>,
) -> Result<ConditioningVector<F>> {
    let batch = t_embed.shape()[0];
    let c = match mode {
        ConditioningMode::Unconditional => t_embed.clone(),
        ConditioningMode::Class => {
            let ids = class_ids.ok_or_else(|| Error::Mode("class conditioning requires class ids".into()))?;
            if ids.len() != batch {
                return Err(Error::Input(format!("{} class ids for batch of {batch}", ids.len())));
            }
            t_embed.add(&embedding(p.get("y_embed.table")?, ids)?)?
        }
        ConditioningMode::Representation => {
            let r = r.ok_or_else(|| Error::Mode("representation conditioning requires r".into()))?;
            if r.rank() != 2 || r.shape()[0] != batch {
                return Err(TensorError::Shape {
                    op: "build_condition",
                    lhs: r.shape().to_vec(),
                    rhs: t_embed.shape().to_vec(),
                }
                .into());
            }
            t_embed.add(&linear(p, "r_proj", r)?)?
        }
    };
    Ok(ConditioningVector { c, mode })
}

/// What a denoiser call is conditioned on, one entry per batch row.
#[derive(Debug, Clone)]
pub enum CondSpec<F: Float> {
    Unconditional,
    Class(Vec<usize>),
    /// Representations `r`, `(batch, repr_dim)`.
    Representation(Tensor<F>),
}

impl<F: Float> CondSpec<F> {
    pub fn mode(&self) -> ConditioningMode {
        match self {
            CondSpec::Unconditional => ConditioningMode::Unconditional,
            CondSpec::Class(_) => ConditioningMode::Class,
            CondSpec::Representation(_) => ConditioningMode::Representation,
        }
    }

    /// Rows `idx` of the spec (a no-op for unconditional).
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Ok(match self {
            CondSpec::Unconditional => CondSpec::Unconditional,
            CondSpec::Class(ids) => CondSpec::Class(idx.iter().map(|&i| ids[i]).collect()),
            CondSpec::Representation(r) => {
                let d = r.shape()[1];
                let data = idx.iter().flat_map(|&i| r.data()[i * d..(i + 1) * d].iter().copied()).collect();
                CondSpec::Representation(Tensor::new(&[idx.len(), d], data)?)
            }
        })
    }
}

/// Anything that predicts `ε` from `(z_t, t, condition)`. The trained
/// network implements it through [`Denoiser`]; tests substitute oracles.
pub trait NoisePredictor<F: Float> {
    fn predict_noise(&self, zt: &Tensor<F>, ts: &[usize], cond: &CondSpec<F>) -> Result<Tensor<F>>;
}

/// The denoising network bound to a parameter graph.
pub struct Denoiser<'a, F: Float> {
    pub params: &'a Bound<F>,
    pub config: &'a ModelConfig,
}

impl<F: Float> NoisePredictor<F> for Denoiser<'_, F> {
    fn predict_noise(&self, zt: &Tensor<F>, ts: &[usize], cond: &CondSpec<F>) -> Result<Tensor<F>> {
        if ts.len() != zt.shape()[0] {
            return Err(Error::Input(format!("{} timesteps for batch of {}", ts.len(), zt.shape()[0])));
        }
        let t_embed = embed_timestep(self.params, self.config, ts)?;
        let c = match cond {
            CondSpec::Unconditional => build_condition(self.params, cond.mode(), &t_embed, None, None)?,
            CondSpec::Class(ids) => build_condition(self.params, cond.mode(), &t_embed, Some(ids), None)?,
            CondSpec::Representation(r) => build_condition(self.params, cond.mode(), &t_embed, None, Some(r))?,
        };
        denoise(self.params, self.config, zt, &c)
    }
}

/// Names belonging to the conditioning pathway.
pub fn is_conditioning_param(name: &str) -> bool {
    name.starts_with("enc.") || name.starts_with("r_proj.") || name.starts_with("y_embed.")
}

/// Replace the conditioning pathway of a trained checkpoint.
///
/// Shared denoiser tensors are copied verbatim; the encoder and the
/// representation projection are dropped. Switching to class mode adds a
/// zero class table so the new model starts out behaving exactly like the
/// unconditional path of the same weights. The step counter restarts at 0.
pub fn swap_conditioning(ckpt: &Checkpoint, new_mode: ConditioningMode, num_classes: usize) -> Result<Checkpoint> {
    if new_mode == ConditioningMode::Representation {
        return Err(Error::Config(
            "cannot swap into representation mode: no trained encoder to carry over".into(),
        ));
    }
    if new_mode == ConditioningMode::Class && num_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
    }
    let mut config = ckpt.model.config.clone();
    config.conditioning = new_mode;
    config.num_classes = (new_mode == ConditioningMode::Class).then_some(num_classes);
    config.validate()?;

    let mut params = ckpt.model.params.clone();
    let dropped: Vec<String> = params.names().filter(|n| is_conditioning_param(n)).cloned().collect();
    for name in dropped {
        params.remove(&name);
    }
    if new_mode == ConditioningMode::Class {
        params.insert("y_embed.table".into(), Array::zeros(&[num_classes, config.hidden]));
    }
    params.check_against(&param_specs(&config))?;
    Ok(Checkpoint {
        model: crate::backbone::Model { config, params },
        schedule: ckpt.schedule,
        step: 0,
    })
}
