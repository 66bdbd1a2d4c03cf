use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn rcldt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rcldt"))
        .args(args)
        .env_remove("RCLDT_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = rcldt(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const MICRO: &str = r#"{
  "model": {
    "image_channels": 1, "image_size": 8, "patch_size": 2, "hidden": 16, "blocks": 1,
    "heads": 2, "mlp_ratio": 4, "encoder_blocks": 1, "encoder_hidden": 16, "repr_dim": 16,
    "num_classes": null, "conditioning": "representation", "timesteps": 1000
  },
  "train": { "batch_size": 4, "steps": 6, "lr": 0.001, "loss_log_every": 2 }
}"#;

const SPEC: &str = r#"{
  "n_images": 16, "image_size": 8, "blob_probability": 0.5, "blob_radius_range": [1.0, 2.0],
  "blob_intensity": 0.95, "background": "rings", "noise_sigma": 0.03, "seed": 3
}"#;

/// Synthetic data, a pretrained representation checkpoint and a
/// fine-tuned class checkpoint in a fresh folder.
struct Toy {
    dir: tempfile::TempDir,
}

impl Toy {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let t = Toy { dir };
        fs::write(t.path("run.json"), MICRO).unwrap();
        fs::write(t.path("spec.json"), SPEC).unwrap();
        ok(&["synth", "--spec", p(&t.path("spec.json")), "--out", p(&t.path("data"))]);
        ok(&[
            "pretrain", "--config", p(&t.path("run.json")), "--data", p(&t.path("data")),
            "--mode", "representation", "--out", p(&t.path("rep.ckpt")),
        ]);
        ok(&[
            "finetune", "--config", p(&t.path("run.json")), "--ckpt", p(&t.path("rep.ckpt")),
            "--data", p(&t.path("data")), "--classes", "2", "--out", p(&t.path("cls.ckpt")),
        ]);
        t
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn classify(&self, report: &str, extra: &[&str]) -> Output {
        let (ckpt, data, report) = (self.path("cls.ckpt"), self.path("data"), self.path(report));
        let mut args = vec!["classify", "--ckpt", p(&ckpt), "--data", p(&data), "--mc", "3", "--report", p(&report)];
        args.extend_from_slice(extra);
        rcldt(&args)
    }
}

#[test]
fn toy_pipeline_runs_end_to_end() {
    let toy = Toy::new();
    for f in ["data/manifest.json", "data/labels.csv", "data/synthetic_spec.json", "rep.ckpt.manifest.json", "rep.loss.csv", "cls.ckpt.manifest.json"] {
        assert!(toy.path(f).is_file(), "{f} missing");
    }

    let out = toy.classify("report.json", &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(toy.path("report.json")).unwrap()).unwrap();
    for key in ["accuracy", "f1", "recall", "precision"] {
        assert!(report[key].is_number(), "{key} missing from {report}");
    }
    assert!(toy.path("report.scores.csv").is_file());

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(toy.path("report.json.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "classify");
    assert_eq!(manifest["config"]["num_mc_samples"], 3);
    assert_eq!(manifest["inputs"]["ckpt"].as_str().unwrap().len(), 64);
    assert!(manifest["outputs"]["report"].is_string());

    let gen = toy.path("gen");
    ok(&["generate", "--ckpt", p(&toy.path("rep.ckpt")), "--n", "3", "--seed", "7", "--reference", p(&toy.path("data")), "--out", p(&gen)]);
    assert!(gen.join("sample_0002.pgm").is_file() && gen.join("index.csv").is_file() && gen.join("manifest.json").is_file());

    let rec = toy.path("rec");
    ok(&["reconstruct", "--ckpt", p(&toy.path("rep.ckpt")), "--data", p(&toy.path("data")), "--t-start", "20", "--n", "4", "--out", p(&rec)]);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(rec.join("reconstruction.json")).unwrap()).unwrap();
    assert_eq!(r["per_image"].as_array().unwrap().len(), 4);

    let grid = toy.path("sweep.pgm");
    ok(&["sweep-z0", "--ckpt", p(&toy.path("rep.ckpt")), "--data", p(&toy.path("data")), "--t", "100,500,900", "--out", p(&grid)]);
    assert!(grid.is_file() && toy.path("sweep.csv").is_file());

    let stdout = ok(&["eval-frechet", "--ckpt", p(&toy.path("rep.ckpt")), "--real", p(&toy.path("data")), "--fake", p(&gen), "--report", p(&toy.path("fd.json"))]);
    let fd: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert!(fd["frechet_distance"].as_f64().unwrap() >= 0.0);

    let mut labels = fs::read_to_string(toy.path("data/labels.csv")).unwrap();
    labels.push_str("ghost.pgm,1\n");
    fs::write(toy.path("data/labels.csv"), labels).unwrap();
    let err = single_error_line(&toy.classify("ghost.json", &[]));
    assert!(err.starts_with("error: ingestion: ") && err.contains("ghost.pgm"), "{err}");
}

#[test]
fn identical_invocations_give_identical_reports() {
    let toy = Toy::new();
    assert!(toy.classify("a.json", &["--seed", "5"]).status.success());
    assert!(toy.classify("b.json", &["--seed", "5"]).status.success());
    assert_eq!(fs::read(toy.path("a.json")).unwrap(), fs::read(toy.path("b.json")).unwrap());
    assert_eq!(fs::read(toy.path("a.scores.csv")).unwrap(), fs::read(toy.path("b.scores.csv")).unwrap());

    // threads from the environment change nothing in the report
    let out = Command::new(env!("CARGO_BIN_EXE_rcldt"))
        .args(["classify", "--ckpt", p(&toy.path("cls.ckpt")), "--data", p(&toy.path("data")), "--mc", "3", "--seed", "5"])
        .args(["--report", p(&toy.path("c.json"))])
        .env("RCLDT_THREADS", "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read(toy.path("a.json")).unwrap(), fs::read(toy.path("c.json")).unwrap());
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(toy.path("c.json.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["threads"], 3);
}

#[test]
fn pretraining_ignores_the_label_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    fs::write(dir.path().join("spec.json"), SPEC).unwrap();
    fs::write(dir.path().join("run.json"), MICRO).unwrap();
    ok(&["synth", "--spec", p(&dir.path().join("spec.json")), "--out", p(&data)]);
    fs::write(data.join("labels.csv"), "garbage,,,\nnot a label file").unwrap();
    ok(&["pretrain", "--config", p(&dir.path().join("run.json")), "--data", p(&data), "--steps", "2", "--out", p(&dir.path().join("m.ckpt"))]);
}

fn single_error_line(out: &Output) -> String {
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    err
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let err = single_error_line(&rcldt(&["pretrain", "--data", "x"]));
    assert!(err.starts_with("error: usage: "), "{err}");
}

#[test]
fn failures_name_their_category() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let err = single_error_line(&rcldt(&["classify", "--ckpt", p(&missing), "--data", p(dir.path()), "--report", "r.json"]));
    assert!(err.starts_with("error: load: "), "{err}");

    fs::write(dir.path().join("bad.json"), "{\"train\": {\"lr\": \"fast\"}}").unwrap();
    let err = single_error_line(&rcldt(&["pretrain", "--config", p(&dir.path().join("bad.json")), "--data", p(dir.path()), "--out", "m.ckpt"]));
    assert!(err.starts_with("error: config: "), "{err}");
}

#[test]
fn help_exits_cleanly() {
    let out = rcldt(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for sub in ["synth", "pretrain", "finetune", "classify", "generate", "reconstruct", "sweep-z0", "eval-frechet"] {
        assert!(text.contains(sub), "{sub} not listed");
    }
}

#[test]
fn shipped_configs_drive_the_cli() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name);
    ok(&["synth", "--n", "4", "--seed", "2", "--out", p(&d("data"))]);
    ok(&["pretrain", "--config", p(&configs.join("pretrain.json")), "--data", p(&d("data")), "--mode", "representation", "--steps", "1", "--out", p(&d("m.ckpt"))]);
    ok(&["finetune", "--config", p(&configs.join("finetune.json")), "--ckpt", p(&d("m.ckpt")), "--data", p(&d("data")), "--classes", "2", "--steps", "1", "--out", p(&d("c.ckpt"))]);
    ok(&["classify", "--config", p(&configs.join("finetune.json")), "--ckpt", p(&d("c.ckpt")), "--data", p(&d("data")), "--mc", "2", "--report", p(&d("r.json"))]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(d("r.json.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["t_strategy"], "stratified");
}
