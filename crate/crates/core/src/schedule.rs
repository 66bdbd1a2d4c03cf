//! Diffusion timestep machinery.
//!
//! Level `t` (0-based, `t = 0` nearly clean) is reached in one jump from the
//! clean latent: `z_t = γ_t z_0 + δ_t ε` with `γ_t² + δ_t² = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Smallest γ_t accepted by [`NoiseSchedule::predict_z0`].
pub const MIN_GAMMA: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    LinearBeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::LinearBeta,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    gamma: Vec<f64>,
    delta: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        build_schedule(config.timesteps, config.kind, config.beta_start, config.beta_end)
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn timesteps(&self) -> usize {
        self.gamma.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    /// `γ_t²`, the cumulative signal retention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.gamma[t] * self.gamma[t]
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.timesteps() {
            return Err(Error::Timestep {
                t,
                total: self.timesteps(),
            });
        }
        Ok(())
    }

    /// `γ_t·z0 + δ_t·eps` for a single timestep.
    pub fn noise<F: Float>(&self, z0: &Tensor<F>, t: usize, eps: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_t(t)?;
        check_same(z0, eps, "noise")?;
        Ok(z0.scale(self.gamma[t]).add(&eps.scale(self.delta[t]))?)
    }

    /// Per-example noising: `ts[i]` applies to row `i` of the leading axis.
    pub fn noise_batch<F: Float>(&self, z0: &Tensor<F>, ts: &[usize], eps: &Tensor<F>) -> Result<Tensor<F>> {
        check_same(z0, eps, "noise")?;
        let (g, d) = self.per_example(z0.shape(), ts, |t| (self.gamma[t], self.delta[t]))?;
        Ok(z0.mul(&g)?.add(&eps.mul(&d)?)?)
    }

    /// Clean-latent estimate `(z_t − δ_t·eps_hat) / γ_t`.
    pub fn predict_z0<F: Float>(&self, zt: &Tensor<F>, eps_hat: &Tensor<F>, t: usize) -> Result<Tensor<F>> {
        self.check_t(t)?;
        check_same(zt, eps_hat, "predict_z0")?;
        self.check_gamma(t)?;
        Ok(zt.sub(&eps_hat.scale(self.delta[t]))?.scale(1.0 / self.gamma[t]))
    }

    pub fn predict_z0_batch<F: Float>(&self, zt: &Tensor<F>, eps_hat: &Tensor<F>, ts: &[usize]) -> Result<Tensor<F>> {
        check_same(zt, eps_hat, "predict_z0")?;
        for &t in ts {
            self.check_t(t)?;
            self.check_gamma(t)?;
        }
        let (inv_g, d) = self.per_example(zt.shape(), ts, |t| (1.0 / self.gamma[t], self.delta[t]))?;
        Ok(zt.sub(&eps_hat.mul(&d)?)?.mul(&inv_g)?)
    }

    fn check_gamma(&self, t: usize) -> Result<()> {
        if self.gamma[t] < MIN_GAMMA {
            return Err(Error::Numerical(format!(
                "γ_{t} = {:e} is below {MIN_GAMMA:e}",
                self.gamma[t]
            )));
        }
        Ok(())
    }

    fn per_example<F: Float>(
        &self,
        shape: &[usize],
        ts: &[usize],
        coef: impl Fn(usize) -> (f64, f64),
    ) -> Result<(Tensor<F>, Tensor<F>)> {
        if shape.is_empty() || shape[0] != ts.len() {
            return Err(Error::Input(format!(
                "{} timesteps for batch of shape {:?}",
                ts.len(),
                shape
            )));
        }
        let mut bshape = vec![1; shape.len()];
        bshape[0] = ts.len();
        let mut a = Vec::with_capacity(ts.len());
        let mut b = Vec::with_capacity(ts.len());
        for &t in ts {
            self.check_t(t)?;
            let (x, y) = coef(t);
            a.push(F::from_f64(x));
            b.push(F::from_f64(y));
        }
        Ok((Tensor::new(&bshape, a)?, Tensor::new(&bshape, b)?))
    }
}

fn check_same<F: Float>(a: &Tensor<F>, b: &Tensor<F>, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(crate::tensor::TensorError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

/// Linear-β schedule: `γ_t = sqrt(∏_{s≤t} (1 − β_s))`, `δ_t = sqrt(1 − γ_t²)`.
pub fn build_schedule(timesteps: usize, kind: ScheduleKind, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::Config("schedule needs at least one timestep".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "invalid beta range [{beta_start}, {beta_end}]: need 0 < start <= end < 1"
        )));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::LinearBeta => (0..timesteps)
            .map(|t| {
                if timesteps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f64 / (timesteps - 1) as f64
                }
            })
            .collect(),
    };
    let mut gamma = Vec::with_capacity(timesteps);
    let mut delta = Vec::with_capacity(timesteps);
    let mut alpha_bar = 1.0;
    for &b in &betas {
        alpha_bar *= 1.0 - b;
        gamma.push(alpha_bar.sqrt());
        delta.push((1.0 - alpha_bar).sqrt());
    }
    Ok(NoiseSchedule {
        config: ScheduleConfig {
            kind,
            timesteps,
            beta_start,
            beta_end,
        },
        betas,
        gamma,
        delta,
    })
}
