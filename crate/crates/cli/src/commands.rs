use std::fs;
use std::path::Path;

use rcldt_core::backbone::{ConditioningMode, ModelConfig};
use rcldt_core::classifier::{evaluate, write_report, ClassifierConfig, TStrategy};
use rcldt_core::data::{generate_synthetic, load_dataset, stack, write_dataset, Dataset, ImageSource, SyntheticSpec};
use rcldt_core::eval::{extract_features, frechet_distance};
use rcldt_core::sampler::{
    condition_for, mean_squared_distance, partial_denoise, sample, split_images, sweep_grid, write_images,
    z0_prediction_sweep, IndexRecord,
};
use rcldt_core::conditioning::CondSpec;
use rcldt_core::data::write_pgm;
use rcldt_core::schedule::ScheduleConfig;
use rcldt_core::training::{finetune, load_checkpoint, pretrain, save_checkpoint, Checkpoint, TrainConfig};
use rcldt_core::{Error, Result, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::args::*;
use crate::manifest::{default_path, Manifest};

/// Everything a run can be configured with. Absent sections take defaults;
/// flags override individual fields.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Defaults to the S-micro geometry in the requested mode.
    pub model: Option<ModelConfig>,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub classifier: ClassifierConfig,
}

fn read_config(arg: &ConfigArg) -> Result<RunConfig> {
    match &arg.config {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn apply_train(cfg: &mut TrainConfig, o: &TrainOverrides) {
    if let Some(v) = o.steps {
        cfg.steps = v;
    }
    if let Some(v) = o.lr {
        cfg.lr = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.precision {
        cfg.precision = v;
    }
    if let Some(v) = o.loss_log_every {
        cfg.loss_log_every = v;
    }
}

fn load_images(dir: &Path) -> Result<Dataset> {
    let ds = load_dataset(dir, None)?;
    if ds.is_empty() {
        return Err(Error::Input(format!("no PGM images in {}", dir.display())));
    }
    Ok(ds)
}

fn load_labeled(dir: &Path) -> Result<Dataset> {
    let csv = dir.join("labels.csv");
    if !csv.is_file() {
        return Err(Error::Ingestion {
            file: csv,
            msg: "labeled folder needs labels.csv".into(),
        });
    }
    let ds = load_dataset(dir, Some(&csv))?;
    if ds.is_empty() {
        return Err(Error::Input(format!("no PGM images in {}", dir.display())));
    }
    Ok(ds)
}

fn check_geometry(model: &ModelConfig, data: &Dataset) -> Result<()> {
    let want = model.latent_shape();
    match data.image_shape() {
        Some(s) if s == want => Ok(()),
        s => Err(Error::Config(format!("images have shape {s:?}, the model expects {want:?}"))),
    }
}

fn finish(manifest: &Manifest, explicit: Option<&Path>, out: &Path) -> Result<()> {
    let path = explicit.map(Path::to_path_buf).unwrap_or_else(|| default_path(out));
    manifest.write(&path)
}

pub fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads.max(1);
    let manifest = cli.manifest.as_deref();
    match cli.command {
        Command::Synth(a) => synth(a, threads, manifest),
        Command::Pretrain(a) => run_pretrain(a, threads, manifest),
        Command::Finetune(a) => run_finetune(a, threads, manifest),
        Command::Classify(a) => classify(a, threads, manifest),
        Command::Generate(a) => generate(a, threads, manifest),
        Command::Reconstruct(a) => reconstruct(a, threads, manifest),
        Command::SweepZ0(a) => sweep(a, threads, manifest),
        Command::EvalFrechet(a) => frechet(a, threads, manifest),
    }
}

fn synth(a: SynthArgs, threads: usize, manifest: Option<&Path>) -> Result<()> {
    let mut spec: SyntheticSpec = match &a.spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).map_err(|e| Error::Config(e.to_string()))?,
        None => SyntheticSpec::default(),
    };
    if let Some(n) = a.n {
        spec.n_images = n;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let ds = generate_synthetic(&spec)?;
    write_dataset(&ds, &a.out)?;
    fs::write(a.out.join("synthetic_spec.json"), serde_json::to_string_pretty(&spec)?)?;
    let mut m = Manifest::new("synth", serde_json::to_value(&spec)?, Some(spec.seed), threads);
    if let Some(p) = &a.spec {
        m.input("spec", p)?;
    }
    m.output("data", &a.out)?;
    finish(&m, manifest, &a.out)?;
    println!("wrote {} images to {}", ds.len(), a.out.display());
    Ok(())
}

fn run_pretrain(a: PretrainArgs, threads: usize, manifest: Option<&Path>) -> Result<()> {
    let mut cfg = read_config(&a.config)?;
    apply_train(&mut cfg.train, &a.train);
    let mut model = cfg
        .model
        .take()
        .unwrap_or_else(|| ModelConfig::s_micro(a.mode.unwrap_or(ConditioningMode::Representation)));
    if let Some(mode) = a.mode {
        model.conditioning = mode;
    }
    model.timesteps = cfg.schedule.timesteps;
    cfg.model = Some(model.clone());
    let data = load_images(&a.data)?;
    check_geometry(&model, &data)?;
    let (ckpt, curve) = pretrain(&cfg.train, &model, cfg.schedule, &data)?;
    save_checkpoint(&ckpt, &a.out)?;
    let loss_csv = a.out.with_extension("loss.csv");
    curve.write_csv(&loss_csv)?;

    let mut m = Manifest::new("pretrain", serde_json::to_value(&cfg)?, Some(cfg.train.seed), threads);
    if let Some(p) = &a.config.config {
        m.input("config", p)?;
    }
    m.input("data", &a.data)?;
    m.output("ckpt", &a.out)?;
    m.output("loss_csv", &loss_csv)?;
    finish(&m, manifest, &a.out)?;
    println!("final smoothed loss {:.6e}", curve.smoothed_final(100));
    Ok(())
}

fn run_finetune(a: FinetuneArgs, threads: usize, manifest: Option<&Path>) -> Result<()> {
    let mut cfg = read_config(&a.config)?;
    apply_train(&mut cfg.train, &a.train);
    if let Some(k) = a.freeze_blocks {
        cfg.train.freeze_blocks = k;
    }
    let ckpt = load_checkpoint(&a.ckpt)?;
    let train = load_labeled(&a.data)?;
    check_geometry(ckpt.config(), &train)?;
    let valid = a.valid.as_deref().map(load_labeled).transpose()?;
    let (out, log) = finetune(&ckpt, &cfg.train, a.classes, &train, valid.as_ref().map(|v| v as _))?;
    save_checkpoint(&out, &a.out)?;
    let loss_csv = a.out.with_extension("loss.csv");
    log.train.write_csv(&loss_csv)?;
    let valid_json = a.out.with_extension("valid.json");
    fs::write(&valid_json, serde_json::to_string_pretty(&log.valid)?)?;

    cfg.model = Some(out.model.config.clone());
    let mut m = Manifest::new("finetune", serde_json::to_value(&cfg)?, Some(cfg.train.seed), threads);
    m.config["classes"] = json!(a.classes);
    if let Some(p) = &a.config.config {
        m.input("config", p)?;
    }
    m.input("ckpt", &a.ckpt)?;
    m.input("data", &a.data)?;
    if let Some(v) = &a.valid {
        m.input("valid", v)?;
    }
    m.output("ckpt", &a.out)?;
    m.output("loss_csv", &loss_csv)?;
    finish(&m, manifest, &a.out)?;
    println!("final smoothed loss {:.6e}", log.train.smoothed_final(100));
    Ok(())
}

fn classify(a: ClassifyArgs, threads: usize, manifest: Option<&Path>) -> Result<()> {
    let run_cfg = read_config(&a.config)?;
    let mut cfg = run_cfg.classifier;
    if let Some(v) = a.mc {
        cfg.num_mc_samples = v;
    }
    if let Some(v) = a.t_strategy {
        cfg.t_strategy = v;
    }
    if let Some(v) = a.t_values {
        cfg.t_values = Some(v);
        if a.t_strategy.is_none() {
            cfg.t_strategy = TStrategy::FixedList;
        }
    }
    if let Some(v) = a.space {
        cfg.scoring_space = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if a.independent_pairs {
        cfg.independent_pairs = true;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    let ckpt = load_checkpoint(&a.ckpt)?;
    let test = load_labeled(&a.data)?;
    check_geometry(ckpt.config(), &test)?;
    let schedule = ckpt.noise_schedule()?;
    let eval = evaluate(&ckpt, &schedule, &test, &cfg, a.positive_class, threads)?;
    let names: Vec<String> = test.items.iter().map(|it| it.name.clone()).collect();
    let classes: Vec<String> = (0..ckpt.config().num_classes.unwrap_or(0)).map(|k| format!("class_{k}")).collect();
    let scores_csv = write_report(&eval, &a.report, &names, &classes)?;

    let mut m = Manifest::new("classify", serde_json::to_value(&cfg)?, Some(cfg.seed), threads);
    m.config["positive_class"] = json!(a.positive_class);
    if let Some(p) = &a.config.config {
        m.input("config", p)?;
    }
    m.input("ckpt", &a.ckpt)?;
    m.input("data", &a.data)?;
    m.output("report", &a.report)?;
    m.output("scores_csv", &scores_csv)?;
    finish(&m, manifest, &a.report)?;
    let r = &eval.metrics;
    println!(
        "accuracy {:.4} precision {:.4} recall {:.4} f1 {:.4}",
        r.accuracy, r.precision, r.recall, r.f1
    );
    Ok(())
}

/// Conditions for `n` rows: a class, or representations of reference images.
fn conditions(ckpt: &Checkpoint, n: usize, class: Option<usize>, reference: Option<&Dataset>) -> Result<(CondSpec<f32>, Vec<String>)> {
    match ckpt.config().conditioning {
        ConditioningMode::Representation => {
            let refs = reference.ok_or_else(|| {
                Error::Mode("representation checkpoints need --reference images to encode".into())
            })?;
            let idx: Vec<usize> = (0..n).map(|i| i % refs.len()).collect();
            let z0: Tensor<f32> = stack(refs, &idx)?;
            let labels = idx.iter().map(|&i| format!("r:{}", refs.items[i].name)).collect();
            Ok((condition_for(ckpt, &z0, None)?, labels))
        }
        ConditioningMode::Class => {
            let z0 = Tensor::<f32>::zeros(&[n, 1]);
            let c = class.ok_or_else(|| Error::Mode("class checkpoints need --class".into()))?;
            Ok((condition_for(ckpt, &z0, Some(c))?, vec![format!("class:{c}"); n]))
        }
        ConditioningMode::Unconditional => Ok((CondSpec::Unconditional, vec!["none".into(); n])),
    }
}

fn generate(a: GenerateArgs, threads: usize, manifest: Option<&Path>) -> Result<()> {
    if a.n == 0 {
        return Err(Error::Input("--n must be at least 1".into()));
    }
    let ckpt = load_checkpoint(&a.ckpt)?;
    let schedule = ckpt.noise_schedule()?;
    let reference = a.reference.as_deref().map(load_images).transpose()?;
    let (cond, labels) = conditions(&ckpt, a.n, a.class, reference.as_ref())?;
    let images = split_images(&sample(&ckpt, &schedule, &cond, a.n, a.seed)?);
    let records: Vec<IndexRecord> = labels
        .into_iter()
        .enumerate()
        .map(|(i, condition)| IndexRecord {
            filename: format!("sample_{i:04}.pgm"),
            seed: a.seed,
            t: 0,
            condition,
        })
        .collect();
    write_images(&a.out, &images, &records)?;

    let config = json!({"n": a.n, "seed": a.seed, "class": a.class});
    let mut m = Manifest::new("generate", config, Some(a.seed), threads);
    m.input("ckpt", &a.ckpt)?;
    if let Some(r) = &a.reference {
        m.input("reference", r)?;
    }
    m.output("images", &a.out)?;
    finish(&m, manifest, &a.out)?;
    println!("wrote {} samples to {}", a.n, a.out.display());
    Ok(())
}

fn reconstruct(a: ReconstructArgs, threads: usize, manifest: Option<&Path>) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let schedule = ckpt.noise_schedule()?;
    let data = load_images(&a.data)?;
    check_geometry(ckpt.config(), &data)?;
    let n = a.n.unwrap_or(data.len()).min(data.len());
    let idx: Vec<usize> = (0..n).collect();
    let z0: Tensor<f32> = stack(&data, &idx)?;
    let cond = condition_for(&ckpt, &z0, a.class)?;
    let recon = partial_denoise(&ckpt, &schedule, &z0, a.t_start, &cond, a.seed)?;
    let errors = mean_squared_distance(&z0, &recon)?;
    let records: Vec<IndexRecord> = idx
        .iter()
        .map(|&i| IndexRecord {
            filename: format!("recon_{}", data.items[i].name),
            seed: a.seed,
            t: a.t_start,
            condition: format!("source:{}", data.items[i].name),
        })
        .collect();
    write_images(&a.out, &split_images(&recon), &records)?;
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let report = json!({
        "t_start": a.t_start,
        "seed": a.seed,
        "mean_squared_error": mean,
        "per_image": idx.iter().map(|&i| json!({"file": data.items[i].name, "squared_error": errors[i]})).collect::<Vec<_>>(),
    });
    fs::write(a.out.join("reconstruction.json"), serde_json::to_string_pretty(&report)?)?;

    let config = json!({"t_start": a.t_start, "n": n, "seed": a.seed, "class": a.class});
    let mut m = Manifest::new("reconstruct", config, Some(a.seed), threads);
    m.input("ckpt", &a.ckpt)?;
    m.input("data", &a.data)?;
    m.output("images", &a.out)?;
    finish(&m, manifest, &a.out)?;
    println!("mean reconstruction error {mean:.6e}");
    Ok(())
}

fn sweep(a: SweepArgs, threads: usize, manifest: Option<&Path>) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let schedule = ckpt.noise_schedule()?;
    let data = load_images(&a.data)?;
    check_geometry(ckpt.config(), &data)?;
    if a.index >= data.len() {
        return Err(Error::Input(format!("--index {} but only {} images", a.index, data.len())));
    }
    let z0: Tensor<f32> = stack(&data, &[a.index])?;
    let cond = condition_for(&ckpt, &z0, a.class)?;
    let points = z0_prediction_sweep(&ckpt, &schedule, &z0, &cond, &a.t, a.seed)?;
    write_pgm(&a.out, &sweep_grid(&points, 0)?)?;
    let csv_path = a.out.with_extension("csv");
    let mut csv = String::from("t,squared_error\n");
    for p in &points {
        csv.push_str(&format!("{},{:e}\n", p.t, mean_squared_distance(&z0, &p.z0_pred)?[0]));
    }
    fs::write(&csv_path, csv)?;

    let config = json!({"index": a.index, "t": a.t, "seed": a.seed, "class": a.class});
    let mut m = Manifest::new("sweep-z0", config, Some(a.seed), threads);
    m.input("ckpt", &a.ckpt)?;
    m.input("data", &a.data)?;
    m.output("grid", &a.out)?;
    m.output("csv", &csv_path)?;
    finish(&m, manifest, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn frechet(a: FrechetArgs, threads: usize, manifest: Option<&Path>) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let real = load_images(&a.real)?;
    let fake = load_images(&a.fake)?;
    check_geometry(ckpt.config(), &real)?;
    check_geometry(ckpt.config(), &fake)?;
    let fr = extract_features(&ckpt, &real)?;
    let ff = extract_features(&ckpt, &fake)?;
    let d = frechet_distance(&fr, &ff)?;
    let report = json!({
        "frechet_distance": d,
        "n_real": real.len(),
        "n_fake": fake.len(),
        "feature_dim": fr.shape[1],
    });
    let text = serde_json::to_string_pretty(&report)?;
    let out = a.report.clone().unwrap_or_else(|| a.fake.join("frechet.json"));
    fs::write(&out, &text)?;

    let mut m = Manifest::new("eval-frechet", json!({}), None, threads);
    m.input("ckpt", &a.ckpt)?;
    m.input("real", &a.real)?;
    m.input("fake", &a.fake)?;
    m.output("report", &out)?;
    let manifest_path = manifest.map(Path::to_path_buf).unwrap_or_else(|| default_path(&out));
    m.write(&manifest_path)?;
    println!("{text}");
    Ok(())
}
