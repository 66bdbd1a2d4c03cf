//! Reverse-process generation: ancestral DDPM sampling from pure noise,
//! partial denoising from an injected `z_t`, and the `z0'`-versus-`t` sweep.
//!
//! Timesteps are 0-based. A chain started at `z_t` runs one ancestral step
//! for each of `t, t−1, …, 0`; the step at 0 adds no noise and returns the
//! clean estimate.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{encode_representation, ConditioningMode};
use crate::conditioning::{CondSpec, Denoiser, NoisePredictor};
use crate::data::{from_latent, write_pgm};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Array, Float, Tensor};
use crate::training::Checkpoint;

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal<F: Float>(rng: &mut impl Rng, shape: &[usize]) -> Result<Tensor<F>> {
    let n = shape.iter().product();
    Ok(Tensor::new(shape, (0..n).map(|_| F::from_f64(rng.sample(StandardNormal))).collect())?)
}

/// `β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`, zero at `t = 0`.
pub fn posterior_variance(schedule: &NoiseSchedule, t: usize) -> f64 {
    if t == 0 {
        return 0.0;
    }
    let beta = schedule.betas()[t];
    beta * (1.0 - schedule.alpha_bar(t - 1)) / (1.0 - schedule.alpha_bar(t))
}

/// Mean of `p(z_{t−1} | z_t)`: `(z_t − β_t/δ_t · ε̂) / sqrt(1 − β_t)`.
pub fn ancestral_mean<F: Float>(schedule: &NoiseSchedule, zt: &Tensor<F>, eps_hat: &Tensor<F>, t: usize) -> Result<Tensor<F>> {
    schedule.check_t(t)?;
    let beta = schedule.betas()[t];
    let coef = beta / schedule.delta()[t];
    Ok(zt.sub(&eps_hat.scale(coef))?.scale(1.0 / (1.0 - beta).sqrt()))
}

/// One reverse step from `z_t`.
pub fn ancestral_step<F: Float>(
    predictor: &impl NoisePredictor<F>,
    schedule: &NoiseSchedule,
    zt: &Tensor<F>,
    t: usize,
    cond: &CondSpec<F>,
    rng: &mut impl Rng,
) -> Result<Tensor<F>> {
    let ts = vec![t; zt.shape()[0]];
    let eps_hat = predictor.predict_noise(zt, &ts, cond)?;
    let mean = ancestral_mean(schedule, zt, &eps_hat, t)?;
    if t == 0 {
        return Ok(mean);
    }
    let noise = normal::<F>(rng, zt.shape())?;
    Ok(mean.add(&noise.scale(posterior_variance(schedule, t).sqrt()))?)
}

fn run_chain<F: Float>(
    predictor: &impl NoisePredictor<F>,
    schedule: &NoiseSchedule,
    mut z: Tensor<F>,
    t_start: usize,
    cond: &CondSpec<F>,
    rng: &mut impl Rng,
) -> Result<Tensor<F>> {
    for t in (0..=t_start).rev() {
        z = ancestral_step(predictor, schedule, &z, t, cond, rng)?;
        if !z.all_finite() {
            return Err(Error::Numerical(format!("sampler produced non-finite values at t={t}")));
        }
    }
    from_latent(&z)
}

/// Generate from pure noise of `shape`; output clamped to `[−1, 1]`.
pub fn sample_with<F: Float>(
    predictor: &impl NoisePredictor<F>,
    schedule: &NoiseSchedule,
    shape: &[usize],
    cond: &CondSpec<F>,
    seed: u64,
) -> Result<Tensor<F>> {
    let mut rng = rng_for(seed);
    let z = normal::<F>(&mut rng, shape)?;
    run_chain(predictor, schedule, z, schedule.timesteps() - 1, cond, &mut rng)
}

/// Noise `z0` to `z_{t_start}` with fresh `ε`, then denoise back to 0.
pub fn partial_denoise_with<F: Float>(
    predictor: &impl NoisePredictor<F>,
    schedule: &NoiseSchedule,
    z0: &Tensor<F>,
    t_start: usize,
    cond: &CondSpec<F>,
    seed: u64,
) -> Result<Tensor<F>> {
    if t_start == 0 || t_start >= schedule.timesteps() {
        return Err(Error::Timestep {
            t: t_start,
            total: schedule.timesteps(),
        });
    }
    let mut rng = rng_for(seed);
    let eps = normal::<F>(&mut rng, z0.shape())?;
    let zt = schedule.noise(z0, t_start, &eps)?;
    run_chain(predictor, schedule, zt, t_start, cond, &mut rng)
}

/// One point of a sweep: the noised input and the reconstruction.
#[derive(Debug, Clone)]
pub struct SweepPoint<F: Float> {
    pub t: usize,
    pub zt: Tensor<F>,
    pub z0_pred: Tensor<F>,
}

/// For each `t`: one noising draw, one denoiser call, one inversion.
pub fn z0_prediction_sweep_with<F: Float>(
    predictor: &impl NoisePredictor<F>,
    schedule: &NoiseSchedule,
    z0: &Tensor<F>,
    cond: &CondSpec<F>,
    t_list: &[usize],
    seed: u64,
) -> Result<Vec<SweepPoint<F>>> {
    let mut rng = rng_for(seed);
    let mut out = Vec::with_capacity(t_list.len());
    for &t in t_list {
        schedule.check_t(t)?;
        let eps = normal::<F>(&mut rng, z0.shape())?;
        let zt = schedule.noise(z0, t, &eps)?;
        let ts = vec![t; z0.shape()[0]];
        let eps_hat = predictor.predict_noise(&zt, &ts, cond)?;
        let z0_pred = schedule.predict_z0(&zt, &eps_hat, t)?;
        out.push(SweepPoint { t, zt, z0_pred });
    }
    Ok(out)
}

fn check_cond(ckpt: &Checkpoint, cond: &CondSpec<f32>, rows: usize) -> Result<()> {
    let mode = ckpt.config().conditioning;
    if cond.mode() != mode {
        return Err(Error::Mode(format!("checkpoint is {mode}, condition is {}", cond.mode())));
    }
    let n = match cond {
        CondSpec::Unconditional => rows,
        CondSpec::Class(ids) => ids.len(),
        CondSpec::Representation(r) => r.shape()[0],
    };
    if n != rows {
        return Err(Error::Input(format!("condition has {n} rows for {rows} images")));
    }
    Ok(())
}

/// The condition a checkpoint naturally uses for images `z0`: nothing,
/// `r = f_φ(z0)` of the given images, or a fixed class for every row.
pub fn condition_for(ckpt: &Checkpoint, z0: &Tensor<f32>, class: Option<usize>) -> Result<CondSpec<f32>> {
    let cfg = ckpt.config();
    let n = z0.shape()[0];
    Ok(match cfg.conditioning {
        ConditioningMode::Unconditional => CondSpec::Unconditional,
        ConditioningMode::Representation => {
            CondSpec::Representation(encode_representation(&ckpt.model.params.constants(), cfg, z0)?.detach())
        }
        ConditioningMode::Class => {
            let c = class.ok_or_else(|| Error::Mode("class checkpoint needs a class id".into()))?;
            if c >= cfg.num_classes.unwrap_or(0) {
                return Err(Error::Input(format!("class {c} outside the checkpoint's classes")));
            }
            CondSpec::Class(vec![c; n])
        }
    })
}

/// `n` samples from a checkpoint.
pub fn sample(ckpt: &Checkpoint, schedule: &NoiseSchedule, cond: &CondSpec<f32>, n: usize, seed: u64) -> Result<Tensor<f32>> {
    check_cond(ckpt, cond, n)?;
    let params = ckpt.model.params.constants();
    let den = Denoiser {
        params: &params,
        config: ckpt.config(),
    };
    let [c, h, w] = ckpt.config().latent_shape();
    sample_with(&den, schedule, &[n, c, h, w], cond, seed)
}

pub fn partial_denoise(
    ckpt: &Checkpoint,
    schedule: &NoiseSchedule,
    z0: &Tensor<f32>,
    t_start: usize,
    cond: &CondSpec<f32>,
    seed: u64,
) -> Result<Tensor<f32>> {
    check_cond(ckpt, cond, z0.shape()[0])?;
    let params = ckpt.model.params.constants();
    let den = Denoiser {
        params: &params,
        config: ckpt.config(),
    };
    partial_denoise_with(&den, schedule, z0, t_start, cond, seed)
}

pub fn z0_prediction_sweep(
    ckpt: &Checkpoint,
    schedule: &NoiseSchedule,
    z0: &Tensor<f32>,
    cond: &CondSpec<f32>,
    t_list: &[usize],
    seed: u64,
) -> Result<Vec<SweepPoint<f32>>> {
    check_cond(ckpt, cond, z0.shape()[0])?;
    let params = ckpt.model.params.constants();
    let den = Denoiser {
        params: &params,
        config: ckpt.config(),
    };
    z0_prediction_sweep_with(&den, schedule, z0, cond, t_list, seed)
}

/// Mean over images of `‖a_i − b_i‖²`, for `(N, …)` batches.
pub fn mean_squared_distance<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Vec<f64>> {
    if a.shape() != b.shape() || a.rank() == 0 {
        return Err(Error::Input(format!("shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    let numel = a.numel() / a.shape()[0].max(1);
    Ok(a.data()
        .chunks(numel)
        .zip(b.data().chunks(numel))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p.as_f64() - q.as_f64()).powi(2)).sum())
        .collect())
}

/// Single-channel tiles laid out row-major, `cols` per row, separated by
/// `pad` pixels of white.
pub fn tile_grid(tiles: &[Array<f32>], cols: usize, pad: usize) -> Result<Array<f32>> {
    let first = tiles.first().ok_or_else(|| Error::Input("no tiles".into()))?;
    let (h, w) = match first.shape.as_slice() {
        [1, h, w] | [h, w] => (*h, *w),
        s => return Err(Error::Input(format!("tiles must be 1×H×W, got {s:?}"))),
    };
    if tiles.iter().any(|t| t.numel() != h * w) {
        return Err(Error::Input("tiles differ in size".into()));
    }
    let cols = cols.clamp(1, tiles.len());
    let rows = tiles.len().div_ceil(cols);
    let (gh, gw) = (rows * h + (rows - 1) * pad, cols * w + (cols - 1) * pad);
    let mut data = vec![1.0f32; gh * gw];
    for (k, tile) in tiles.iter().enumerate() {
        let (oy, ox) = ((k / cols) * (h + pad), (k % cols) * (w + pad));
        for y in 0..h {
            let dst = (oy + y) * gw + ox;
            data[dst..dst + w].copy_from_slice(&tile.data[y * w..(y + 1) * w]);
        }
    }
    Ok(Array::new(vec![1, gh, gw], data)?)
}

/// Rows of a batch as separate `C×H×W` arrays, clamped to `[−1, 1]`.
pub fn split_images(batch: &Tensor<f32>) -> Vec<Array<f32>> {
    let n = batch.shape()[0];
    let shape = batch.shape()[1..].to_vec();
    let numel = batch.numel() / n.max(1);
    batch
        .data()
        .chunks(numel)
        .map(|c| Array {
            shape: shape.clone(),
            data: c.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
        })
        .collect()
}

/// Sweep grid for image `row` of the batch: `z_t` on top, `z0'` below,
/// one column per `t`.
pub fn sweep_grid(points: &[SweepPoint<f32>], row: usize) -> Result<Array<f32>> {
    let pick = |t: &Tensor<f32>| split_images(t).into_iter().nth(row);
    let mut tiles = Vec::with_capacity(2 * points.len());
    for p in points {
        tiles.push(pick(&p.zt).ok_or_else(|| Error::Input(format!("no image {row} in sweep")))?);
    }
    for p in points {
        tiles.push(pick(&p.z0_pred).ok_or_else(|| Error::Input(format!("no image {row} in sweep")))?);
    }
    tile_grid(&tiles, points.len(), 1)
}

/// One line of the image index CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexRecord {
    pub filename: String,
    pub seed: u64,
    pub t: usize,
    pub condition: String,
}

/// Write each image as a PGM plus `index.csv` describing them.
pub fn write_images(dir: &Path, images: &[Array<f32>], records: &[IndexRecord]) -> Result<()> {
    if images.len() != records.len() {
        return Err(Error::Input("one index record per image required".into()));
    }
    std::fs::create_dir_all(dir)?;
    for (img, rec) in images.iter().zip(records) {
        write_pgm(&dir.join(&rec.filename), img)?;
    }
    let mut w = csv::Writer::from_path(dir.join("index.csv")).map_err(|e| Error::Input(e.to_string()))?;
    for rec in records {
        w.serialize(rec).map_err(|e| Error::Input(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
