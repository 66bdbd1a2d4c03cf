//! Diffusion classification over a frozen class-conditioned denoiser.
//!
//! For every sample a set of `(t, ε)` pairs is drawn once and reused for
//! each candidate label. A label's score is the Monte Carlo mean of
//! `‖z0 − z0'‖²` (z0 space) or `‖ε − ε'‖²` (epsilon space); the label with
//! the lowest score wins, ties going to the lowest index.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::ConditioningMode;
use crate::conditioning::{CondSpec, Denoiser, NoisePredictor};
use crate::data::{stack, LabeledSource};
use crate::error::{Error, Result};
use crate::eval::{classification_metrics, ClassificationReport};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Float, Tensor};
use crate::training::Checkpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TStrategy {
    UniformRandom,
    FixedList,
    Stratified,
}

impl std::str::FromStr for TStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform-random" => Ok(Self::UniformRandom),
            "fixed-list" => Ok(Self::FixedList),
            "stratified" => Ok(Self::Stratified),
            other => Err(Error::Config(format!("unknown t strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringSpace {
    Z0,
    Epsilon,
}

impl std::str::FromStr for ScoringSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "z0" => Ok(Self::Z0),
            "epsilon" => Ok(Self::Epsilon),
            other => Err(Error::Config(format!("unknown scoring space `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    /// Monte Carlo pairs per sample (S).
    pub num_mc_samples: usize,
    pub t_strategy: TStrategy,
    /// Used by `fixed-list`, cycled when shorter than S.
    pub t_values: Option<Vec<usize>>,
    pub seed: u64,
    pub scoring_space: ScoringSpace,
    /// Draw separate pairs for every class instead of sharing them.
    pub independent_pairs: bool,
    /// Rows per denoiser call.
    pub batch_size: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            num_mc_samples: 32,
            t_strategy: TStrategy::Stratified,
            t_values: None,
            seed: 0,
            scoring_space: ScoringSpace::Z0,
            independent_pairs: false,
            batch_size: 64,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if self.num_mc_samples == 0 || self.batch_size == 0 {
            return Err(Error::Config("num_mc_samples and batch_size must be >= 1".into()));
        }
        if self.t_strategy == TStrategy::FixedList {
            let ts = self.t_values.as_deref().unwrap_or(&[]);
            if ts.is_empty() {
                return Err(Error::Config("fixed-list strategy needs t_values".into()));
            }
            if let Some(&t) = ts.iter().find(|&&t| t >= timesteps) {
                return Err(Error::Timestep { t, total: timesteps });
            }
        }
        Ok(())
    }
}

/// Evenly spaced timesteps over `[0.05T, 0.95T]`, rounded.
pub fn stratified_timesteps(s: usize, timesteps: usize) -> Vec<usize> {
    let (lo, hi) = (0.05 * timesteps as f64, 0.95 * timesteps as f64);
    if s == 1 {
        return vec![((lo + hi) / 2.0).round() as usize];
    }
    (0..s)
        .map(|i| (lo + (hi - lo) * i as f64 / (s - 1) as f64).round() as usize)
        .collect()
}

/// One Monte Carlo draw: a timestep and a noise image.
#[derive(Debug, Clone, PartialEq)]
pub struct McPair {
    pub t: usize,
    pub eps: Vec<f64>,
}

/// The pairs used for sample `sample_index`. Each sample has its own RNG
/// stream, so results do not depend on how samples are batched. With
/// `independent_pairs`, class `c` gets the `c`-th block of S draws from
/// that stream; otherwise every class shares block 0.
pub fn draw_pairs(
    cfg: &ClassifierConfig,
    timesteps: usize,
    numel: usize,
    sample_index: usize,
    class: usize,
) -> Result<Vec<McPair>> {
    cfg.validate(timesteps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(sample_index as u64);
    let block = if cfg.independent_pairs { class } else { 0 };
    let mut pairs = Vec::new();
    for _ in 0..=block {
        let s = cfg.num_mc_samples;
        let ts = match cfg.t_strategy {
            TStrategy::Stratified => stratified_timesteps(s, timesteps),
            TStrategy::FixedList => {
                let list = cfg.t_values.as_deref().unwrap_or(&[]);
                (0..s).map(|i| list[i % list.len()]).collect()
            }
            TStrategy::UniformRandom => (0..s).map(|_| rng.random_range(0..timesteps)).collect(),
        };
        pairs = ts
            .into_iter()
            .map(|t| McPair {
                t,
                eps: (0..numel).map(|_| rng.sample(StandardNormal)).collect(),
            })
            .collect();
    }
    Ok(pairs)
}

/// Per-sample Monte Carlo mean errors, one column per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub space: ScoringSpace,
    pub scores: Vec<Vec<f64>>,
    pub chosen: Vec<usize>,
}

impl ScoreMatrix {
    fn from_scores(space: ScoringSpace, scores: Vec<Vec<f64>>) -> Self {
        let chosen = scores.iter().map(|row| argmin(row)).collect();
        Self { space, scores, chosen }
    }

    /// CSV with a `sample` column followed by one column per class.
    pub fn to_csv(&self, sample_names: &[String], class_names: &[String]) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Input(e.to_string());
        let mut header = vec!["sample".to_string()];
        header.extend(class_names.iter().cloned());
        w.write_record(&header).map_err(io)?;
        for (name, row) in sample_names.iter().zip(&self.scores) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| format!("{v:e}")));
            w.write_record(&rec).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// Index of the smallest value; the first one on ties.
pub fn argmin(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v < row[best] {
            best = i;
        }
    }
    best
}

/// Both scoring spaces from one pass over the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub z0: ScoreMatrix,
    pub epsilon: ScoreMatrix,
}

impl Scores {
    pub fn get(&self, space: ScoringSpace) -> &ScoreMatrix {
        match space {
            ScoringSpace::Z0 => &self.z0,
            ScoringSpace::Epsilon => &self.epsilon,
        }
    }
}

/// Score every sample of `z0` `(N, C, H, W)` against `num_classes` labels.
/// Sample `i` uses RNG stream `first_index + i`.
pub fn score_with<F: Float>(
    predictor: &impl NoisePredictor<F>,
    schedule: &NoiseSchedule,
    z0: &Tensor<F>,
    num_classes: usize,
    cfg: &ClassifierConfig,
    first_index: usize,
) -> Result<Scores> {
    if num_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
    }
    if z0.rank() < 2 {
        return Err(Error::Input(format!("expected a batch of images, got shape {:?}", z0.shape())));
    }
    let n = z0.shape()[0];
    let numel = z0.numel() / n.max(1);
    let row_shape = &z0.shape()[1..];
    let s = cfg.num_mc_samples;
    let mut z_scores = vec![vec![0.0; num_classes]; n];
    let mut e_scores = vec![vec![0.0; num_classes]; n];

    // every (sample, class, pair) is one denoiser row
    struct Row {
        sample: usize,
        class: usize,
        t: usize,
        eps: Vec<f64>,
    }
    let mut pending: Vec<Row> = Vec::with_capacity(cfg.batch_size);
    let mut flush = |rows: &mut Vec<Row>| -> Result<()> {
        if rows.is_empty() {
            return Ok(());
        }
        let b = rows.len();
        let mut shape = vec![b];
        shape.extend_from_slice(row_shape);
        let mut x0 = Vec::with_capacity(b * numel);
        let mut eps = Vec::with_capacity(b * numel);
        for r in rows.iter() {
            x0.extend_from_slice(&z0.data()[r.sample * numel..(r.sample + 1) * numel]);
            eps.extend(r.eps.iter().map(|&v| F::from_f64(v)));
        }
        let ts: Vec<usize> = rows.iter().map(|r| r.t).collect();
        let eps = Tensor::new(&shape, eps)?;
        let zt = schedule.noise_batch(&Tensor::new(&shape, x0)?, &ts, &eps)?;
        let classes = CondSpec::Class(rows.iter().map(|r| r.class).collect());
        let eps_hat = predictor.predict_noise(&zt, &ts, &classes)?;
        for (i, r) in rows.iter().enumerate() {
            let (g, d) = (schedule.gamma()[r.t], schedule.delta()[r.t]);
            let x = &z0.data()[r.sample * numel..(r.sample + 1) * numel];
            let zt = &zt.data()[i * numel..(i + 1) * numel];
            let eh = &eps_hat.data()[i * numel..(i + 1) * numel];
            let (mut ez, mut ee) = (0.0, 0.0);
            for j in 0..numel {
                let (eh, zt) = (eh[j].as_f64(), zt[j].as_f64());
                let z0p = (zt - d * eh) / g;
                ez += (x[j].as_f64() - z0p).powi(2);
                let f = F::from_f64(r.eps[j]).as_f64();
                ee += (eh - f).powi(2);
            }
            z_scores[r.sample][r.class] += ez / s as f64;
            e_scores[r.sample][r.class] += ee / s as f64;
        }
        rows.clear();
        Ok(())
    };

    for sample in 0..n {
        let shared = if cfg.independent_pairs {
            None
        } else {
            Some(draw_pairs(cfg, schedule.timesteps(), numel, first_index + sample, 0)?)
        };
        for class in 0..num_classes {
            let pairs = match &shared {
                Some(p) => p.clone(),
                None => draw_pairs(cfg, schedule.timesteps(), numel, first_index + sample, class)?,
            };
            for pair in pairs {
                schedule.check_t(pair.t)?;
                pending.push(Row {
                    sample,
                    class,
                    t: pair.t,
                    eps: pair.eps,
                });
                if pending.len() == cfg.batch_size {
                    flush(&mut pending)?;
                }
            }
        }
    }
    flush(&mut pending)?;
    for row in z_scores.iter().chain(&e_scores) {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite classifier score".into()));
        }
    }
    Ok(Scores {
        z0: ScoreMatrix::from_scores(ScoringSpace::Z0, z_scores),
        epsilon: ScoreMatrix::from_scores(ScoringSpace::Epsilon, e_scores),
    })
}

fn check_class_checkpoint(ckpt: &Checkpoint, num_classes: usize) -> Result<()> {
    let cfg = ckpt.config();
    if cfg.conditioning != ConditioningMode::Class {
        return Err(Error::Mode(format!(
            "classification needs a class-conditioned checkpoint, got {}",
            cfg.conditioning
        )));
    }
    if cfg.num_classes != Some(num_classes) {
        return Err(Error::Config(format!(
            "checkpoint has {:?} classes, asked for {num_classes}",
            cfg.num_classes
        )));
    }
    Ok(())
}

/// Score a batch with a checkpoint, splitting samples over `threads`
/// workers. Every worker binds its own copy of the weights; per-sample RNG
/// streams make the result independent of the thread count.
pub fn score(
    ckpt: &Checkpoint,
    schedule: &NoiseSchedule,
    z0: &Tensor<f32>,
    num_classes: usize,
    cfg: &ClassifierConfig,
    threads: usize,
) -> Result<Scores> {
    check_class_checkpoint(ckpt, num_classes)?;
    cfg.validate(schedule.timesteps())?;
    let n = z0.shape().first().copied().unwrap_or(0);
    let per = n.div_ceil(threads.max(1)).max(1);
    let row_shape = z0.shape()[1..].to_vec();
    let numel: usize = row_shape.iter().product();
    let data = z0.data();
    let run = |start: usize, end: usize| -> Result<Scores> {
        let params = ckpt.model.params.constants();
        let predictor = Denoiser {
            params: &params,
            config: ckpt.config(),
        };
        let mut shape = vec![end - start];
        shape.extend_from_slice(&row_shape);
        let part = Tensor::new(&shape, data[start * numel..end * numel].to_vec())?;
        score_with(&predictor, schedule, &part, num_classes, cfg, start)
    };
    let ranges: Vec<(usize, usize)> = (0..n).step_by(per).map(|s| (s, (s + per).min(n))).collect();
    let parts: Vec<Result<Scores>> = if ranges.len() <= 1 {
        ranges.iter().map(|&(s, e)| run(s, e)).collect()
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = ranges.iter().map(|&(s, e)| scope.spawn(move || run(s, e))).collect();
            handles.into_iter().map(|h| h.join().expect("classifier worker panicked")).collect()
        })
    };
    let mut z = Vec::with_capacity(n);
    let mut e = Vec::with_capacity(n);
    for part in parts {
        let part = part?;
        z.extend(part.z0.scores);
        e.extend(part.epsilon.scores);
    }
    Ok(Scores {
        z0: ScoreMatrix::from_scores(ScoringSpace::Z0, z),
        epsilon: ScoreMatrix::from_scores(ScoringSpace::Epsilon, e),
    })
}

/// Diffusion Classifier Zero: argmin of the z0-space score.
pub fn classify(
    ckpt: &Checkpoint,
    schedule: &NoiseSchedule,
    z0: &Tensor<f32>,
    num_classes: usize,
    cfg: &ClassifierConfig,
) -> Result<(Vec<usize>, ScoreMatrix)> {
    let m = score(ckpt, schedule, z0, num_classes, cfg, 1)?.z0;
    Ok((m.chosen.clone(), m))
}

/// Epsilon-space baseline with the same pairs.
pub fn classify_epsilon(
    ckpt: &Checkpoint,
    schedule: &NoiseSchedule,
    z0: &Tensor<f32>,
    num_classes: usize,
    cfg: &ClassifierConfig,
) -> Result<(Vec<usize>, ScoreMatrix)> {
    let m = score(ckpt, schedule, z0, num_classes, cfg, 1)?.epsilon;
    Ok((m.chosen.clone(), m))
}

/// Metrics for the configured scoring space, with the other space's
/// predictions kept alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub scoring_space: ScoringSpace,
    pub metrics: ClassificationReport,
    pub other_space_metrics: ClassificationReport,
    /// Fraction of samples where both spaces pick the same label.
    pub space_agreement: f64,
    pub y_true: Vec<usize>,
    pub y_pred: Vec<usize>,
    pub config: ClassifierConfig,
    #[serde(skip)]
    pub scores: Option<Scores>,
}

impl Evaluation {
    /// Flat JSON report: the metric fields at top level plus context.
    pub fn to_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(&self.metrics)?;
        let obj = v.as_object_mut().expect("metrics serialize to an object");
        obj.insert("scoring_space".into(), serde_json::to_value(self.scoring_space)?);
        obj.insert("other_space".into(), serde_json::to_value(&self.other_space_metrics)?);
        obj.insert("space_agreement".into(), self.space_agreement.into());
        obj.insert("y_true".into(), serde_json::to_value(&self.y_true)?);
        obj.insert("y_pred".into(), serde_json::to_value(&self.y_pred)?);
        obj.insert("config".into(), serde_json::to_value(&self.config)?);
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

/// Classify a labeled set and compute metrics for `positive_class`.
pub fn evaluate(
    ckpt: &Checkpoint,
    schedule: &NoiseSchedule,
    test: &(impl LabeledSource + ?Sized),
    cfg: &ClassifierConfig,
    positive_class: usize,
    threads: usize,
) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Input("empty test set".into()));
    }
    let num_classes = ckpt.config().num_classes.unwrap_or(0);
    let y_true = (0..test.len())
        .map(|i| test.label(i).ok_or_else(|| Error::Input(format!("test item {i} has no label"))))
        .collect::<Result<Vec<_>>>()?;
    let idx: Vec<usize> = (0..test.len()).collect();
    let z0: Tensor<f32> = stack(test, &idx)?;
    let scores = score(ckpt, schedule, &z0, num_classes, cfg, threads)?;
    let other = match cfg.scoring_space {
        ScoringSpace::Z0 => ScoringSpace::Epsilon,
        ScoringSpace::Epsilon => ScoringSpace::Z0,
    };
    let (main, alt) = (scores.get(cfg.scoring_space), scores.get(other));
    let agree = main.chosen.iter().zip(&alt.chosen).filter(|(a, b)| a == b).count();
    Ok(Evaluation {
        scoring_space: cfg.scoring_space,
        metrics: classification_metrics(&y_true, &main.chosen, positive_class)?,
        other_space_metrics: classification_metrics(&y_true, &alt.chosen, positive_class)?,
        space_agreement: agree as f64 / test.len() as f64,
        y_pred: main.chosen.clone(),
        y_true,
        config: cfg.clone(),
        scores: Some(scores),
    })
}

/// Write the JSON report and, next to it, the score CSV of the main space.
pub fn write_report(
    eval: &Evaluation,
    json_path: &Path,
    sample_names: &[String],
    class_names: &[String],
) -> Result<std::path::PathBuf> {
    std::fs::File::create(json_path)?.write_all(eval.to_json()?.as_bytes())?;
    let csv_path = json_path.with_extension("scores.csv");
    if let Some(scores) = &eval.scores {
        std::fs::write(&csv_path, scores.get(eval.scoring_space).to_csv(sample_names, class_names)?)?;
    }
    Ok(csv_path)
}
