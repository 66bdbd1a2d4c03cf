//! Pretraining (jointly over θ and φ) and class-conditioned fine-tuning on
//! the noise-prediction loss, with AdamW and binary checkpoints.

mod adamw;
mod checkpoint;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{encode_representation, Bound, ConditioningMode, Model, ModelConfig};
use crate::conditioning::{swap_conditioning, CondSpec, Denoiser, NoisePredictor};
use crate::data::{stack, ImageSource, LabeledSource};
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::tensor::{Float, Precision, Tensor};

pub use adamw::{clip_grad_norm, AdamW, OptimizerKind};
pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, MAGIC, VERSION};

/// RNG stream ids derived from the run seed.
pub(crate) const STREAM_BATCH: u64 = 1;
pub(crate) const STREAM_NOISE: u64 = 2;
pub(crate) const STREAM_VALID: u64 = 3;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub precision: Precision,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub loss_log_every: usize,
    /// Leading denoiser blocks kept fixed during fine-tuning.
    pub freeze_blocks: usize,
    /// Global gradient-norm clip; off by default.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr: 1e-4,
            steps: 1000,
            seed: 0,
            precision: Precision::F32,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 0.0,
            loss_log_every: 50,
            freeze_blocks: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.lr.is_nan() || self.lr < 0.0 || self.loss_log_every == 0 {
            return Err(Error::Config("batch_size >= 1, lr >= 0 and loss_log_every >= 1 required".into()));
        }
        Ok(())
    }
}

/// Losses of every step plus the windowed means that get logged.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossCurve {
    pub raw: Vec<f64>,
    /// `(steps completed, mean loss over the preceding window)`.
    pub logged: Vec<(usize, f64)>,
}

impl LossCurve {
    fn push(&mut self, loss: f64, every: usize) {
        self.raw.push(loss);
        let n = self.raw.len();
        if n % every == 0 {
            let mean = self.raw[n - every..].iter().sum::<f64>() / every as f64;
            self.logged.push((n, mean));
        }
    }

    /// Mean of the last `window` step losses.
    pub fn smoothed_final(&self, window: usize) -> f64 {
        let k = window.min(self.raw.len()).max(1);
        self.raw[self.raw.len().saturating_sub(k)..].iter().sum::<f64>() / k as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (step, loss) in &self.logged {
            s.push_str(&format!("{step},{loss:e}\n"));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Per-example timesteps and noise for one loss evaluation.
#[derive(Debug, Clone)]
pub struct StepDraw<F: Float> {
    pub ts: Vec<usize>,
    pub eps: Tensor<F>,
}

/// `t ~ U{0..T}` per example, then `ε ~ N(0, I)` shaped like the batch.
pub fn draw_step<F: Float>(rng: &mut impl Rng, batch_shape: &[usize], timesteps: usize) -> Result<StepDraw<F>> {
    let ts = (0..batch_shape[0]).map(|_| rng.random_range(0..timesteps)).collect();
    let n: usize = batch_shape.iter().product();
    let eps = (0..n).map(|_| F::from_f64(rng.sample(StandardNormal))).collect();
    Ok(StepDraw {
        ts,
        eps: Tensor::new(batch_shape, eps)?,
    })
}

/// Mean squared error over every element.
pub fn mse<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    Ok(a.sub(b)?.square()?.mean())
}

/// Noise-prediction loss for an arbitrary predictor.
pub fn loss_with<F: Float>(
    predictor: &impl NoisePredictor<F>,
    schedule: &NoiseSchedule,
    z0: &Tensor<F>,
    cond: &CondSpec<F>,
    draw: &StepDraw<F>,
) -> Result<Tensor<F>> {
    let zt = schedule.noise_batch(z0, &draw.ts, &draw.eps)?;
    let eps_hat = predictor.predict_noise(&zt, &draw.ts, cond)?;
    mse(&eps_hat, &draw.eps)
}

/// The condition a training batch gets in the model's mode. In
/// representation mode `r = f_φ(z0)` stays in the graph so φ is trained too.
pub fn training_condition<F: Float>(
    p: &Bound<F>,
    cfg: &ModelConfig,
    z0: &Tensor<F>,
    labels: Option<&[usize]>,
) -> Result<CondSpec<F>> {
    Ok(match cfg.conditioning {
        ConditioningMode::Unconditional => CondSpec::Unconditional,
        ConditioningMode::Class => {
            let labels = labels.ok_or_else(|| Error::Mode("class-conditioned training needs labels".into()))?;
            let n = cfg.num_classes.unwrap_or(0);
            if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
                return Err(Error::Input(format!("label {bad} outside the {n} classes")));
            }
            CondSpec::Class(labels.to_vec())
        }
        ConditioningMode::Representation => CondSpec::Representation(encode_representation(p, cfg, z0)?),
    })
}

/// `‖ε − g_θ(z_t, c, t)‖²` averaged over all elements.
pub fn loss_step<F: Float>(
    p: &Bound<F>,
    cfg: &ModelConfig,
    schedule: &NoiseSchedule,
    z0: &Tensor<F>,
    labels: Option<&[usize]>,
    draw: &StepDraw<F>,
) -> Result<Tensor<F>> {
    let cond = training_condition(p, cfg, z0, labels)?;
    loss_with(&Denoiser { params: p, config: cfg }, schedule, z0, &cond, draw)
}

/// Walks shuffled epochs, filling batches across epoch boundaries.
struct BatchCursor {
    order: Vec<usize>,
    pos: usize,
    epochs: usize,
    rng: ChaCha8Rng,
}

impl BatchCursor {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        let mut c = Self {
            order: (0..n).collect(),
            pos: 0,
            epochs: 0,
            rng,
        };
        c.order.shuffle(&mut c.rng);
        c
    }

    /// Next batch and whether it completed an epoch.
    fn next(&mut self, size: usize) -> (Vec<usize>, bool) {
        let mut out = Vec::with_capacity(size);
        let mut wrapped = false;
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
                self.epochs += 1;
                wrapped = true;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.epochs += 1;
            wrapped = true;
        }
        (out, wrapped)
    }
}

/// Loop shared by pretraining and fine-tuning.
fn train_loop<F: Float>(
    model: &mut Model<F>,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    n_items: usize,
    trainable: impl Fn(&str) -> bool,
    mut fetch: impl FnMut(&[usize]) -> Result<(Tensor<F>, Option<Vec<usize>>)>,
    mut on_epoch: impl FnMut(usize, usize, &Model<F>) -> Result<()>,
) -> Result<LossCurve> {
    cfg.validate()?;
    if n_items == 0 {
        return Err(Error::Input("empty dataset".into()));
    }
    let mut cursor = BatchCursor::new(n_items, stream_rng(cfg.seed, STREAM_BATCH));
    let mut noise_rng = stream_rng(cfg.seed, STREAM_NOISE);
    let mut opt = match cfg.optimizer {
        OptimizerKind::AdamW => AdamW::new(cfg.weight_decay),
    };
    let mut curve = LossCurve::default();
    for step in 0..cfg.steps {
        let (idx, epoch_done) = cursor.next(cfg.batch_size);
        let (z0, labels) = fetch(&idx)?;
        let draw = draw_step::<F>(&mut noise_rng, z0.shape(), schedule.timesteps())?;
        let bound = model.params.bind(&trainable);
        let loss = loss_step(&bound, &model.config, schedule, &z0, labels.as_deref(), &draw)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Divergence { step });
        }
        loss.backward()?;
        let mut grads = bound.grads();
        drop(bound);
        if let Some(max) = cfg.grad_clip {
            clip_grad_norm(&mut grads, max);
        }
        opt.step(&mut model.params, &grads, cfg.lr);
        curve.push(value, cfg.loss_log_every);
        if epoch_done {
            on_epoch(cursor.epochs, step + 1, model)?;
        }
    }
    Ok(curve)
}

/// Train a fresh model on unlabeled images in unconditional or
/// representation mode.
pub fn pretrain(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    schedule: ScheduleConfig,
    data: &(impl ImageSource + ?Sized),
) -> Result<(Checkpoint, LossCurve)> {
    match cfg.precision {
        Precision::F32 => pretrain_in::<f32>(cfg, model_cfg, schedule, data),
        Precision::F64 => pretrain_in::<f64>(cfg, model_cfg, schedule, data),
    }
}

fn pretrain_in<F: Float>(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    schedule_cfg: ScheduleConfig,
    data: &(impl ImageSource + ?Sized),
) -> Result<(Checkpoint, LossCurve)> {
    if model_cfg.conditioning == ConditioningMode::Class {
        return Err(Error::Mode("pretraining runs unconditional or representation mode".into()));
    }
    if model_cfg.timesteps != schedule_cfg.timesteps {
        return Err(Error::Config("model and schedule disagree on T".into()));
    }
    let schedule = NoiseSchedule::new(schedule_cfg)?;
    let mut model = Model::<F>::init(model_cfg.clone(), cfg.seed)?;
    let curve = train_loop(
        &mut model,
        &schedule,
        cfg,
        data.len(),
        |_| true,
        |idx| Ok((stack(data, idx)?, None)),
        |_, _, _| Ok(()),
    )?;
    let ckpt = Checkpoint {
        model: model.cast(),
        schedule: schedule_cfg,
        step: cfg.steps as u64,
    };
    Ok((ckpt, curve))
}

/// Validation loss after an epoch of fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub train: LossCurve,
    pub valid: Vec<EpochLoss>,
}

fn labels_of(data: &(impl LabeledSource + ?Sized), idx: &[usize]) -> Result<Vec<usize>> {
    idx.iter()
        .map(|&i| {
            data.label(i)
                .ok_or_else(|| Error::Mode(format!("item {i} has no label; class mode needs labels")))
        })
        .collect()
}

/// Mean loss over a labeled set with fixed draws (same every call).
pub fn validation_loss<F: Float>(
    model: &Model<F>,
    schedule: &NoiseSchedule,
    data: &(impl LabeledSource + ?Sized),
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = stream_rng(seed, STREAM_VALID);
    let p = model.params.constants();
    let all: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for idx in all.chunks(batch_size.max(1)) {
        let z0 = stack::<F>(data, idx)?;
        let labels = labels_of(data, idx)?;
        let draw = draw_step::<F>(&mut rng, z0.shape(), schedule.timesteps())?;
        total += loss_step(&p, &model.config, schedule, &z0, Some(&labels), &draw)?.item() * idx.len() as f64;
    }
    Ok(total / data.len().max(1) as f64)
}

/// Swap in a zero class table (unless the checkpoint is already
/// class-conditioned) and train on labeled images.
pub fn finetune(
    ckpt: &Checkpoint,
    cfg: &TrainConfig,
    num_classes: usize,
    train: &(impl LabeledSource + ?Sized),
    valid: Option<&dyn LabeledSource>,
) -> Result<(Checkpoint, FinetuneLog)> {
    match cfg.precision {
        Precision::F32 => finetune_in::<f32>(ckpt, cfg, num_classes, train, valid),
        Precision::F64 => finetune_in::<f64>(ckpt, cfg, num_classes, train, valid),
    }
}

fn finetune_in<F: Float>(
    ckpt: &Checkpoint,
    cfg: &TrainConfig,
    num_classes: usize,
    train: &(impl LabeledSource + ?Sized),
    valid: Option<&dyn LabeledSource>,
) -> Result<(Checkpoint, FinetuneLog)> {
    let start = if ckpt.model.config.conditioning == ConditioningMode::Class {
        if ckpt.model.config.num_classes != Some(num_classes) {
            return Err(Error::Config(format!(
                "checkpoint has {:?} classes, asked for {num_classes}",
                ckpt.model.config.num_classes
            )));
        }
        Checkpoint { step: 0, ..ckpt.clone() }
    } else {
        swap_conditioning(ckpt, ConditioningMode::Class, num_classes)?
    };
    let schedule = start.noise_schedule()?;
    let mut model: Model<F> = start.model.cast();
    let frozen = cfg.freeze_blocks;
    let trainable = |name: &str| {
        !(0..frozen).any(|i| name.starts_with(&format!("blocks.{i}.")))
    };
    let mut log = FinetuneLog::default();
    let valid_batch = cfg.batch_size;
    let train_curve = train_loop(
        &mut model,
        &schedule,
        cfg,
        train.len(),
        trainable,
        |idx| Ok((stack(train, idx)?, Some(labels_of(train, idx)?))),
        |epoch, step, m| {
            if let Some(v) = valid {
                let loss = validation_loss(m, &schedule, v, valid_batch, cfg.seed)?;
                log.valid.push(EpochLoss { epoch, step, loss });
            }
            Ok(())
        },
    )?;
    log.train = train_curve;
    let out = Checkpoint {
        model: model.cast(),
        schedule: start.schedule,
        step: cfg.steps as u64,
    };
    Ok((out, log))
}
