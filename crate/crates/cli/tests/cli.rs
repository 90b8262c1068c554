use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const TINY: &str = r#"{
  "attention": {"heads": 2, "head_dim": 4, "fused_channels": 8, "context_channels": 8},
  "templates": 3, "hidden": 16, "latent": 4, "epochs": 1, "batch": 8
}"#;

fn afford(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_afford")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = afford(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], code: &str) -> String {
    let out = afford(args);
    assert!(!out.status.success(), "{args:?} succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with(code), "{args:?}: {err}");
    err
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn dataset(&self) -> PathBuf {
        self.dir.path().join("data")
    }
    fn config(&self) -> PathBuf {
        self.dir.path().join("tiny.json")
    }
    fn run(&self) -> PathBuf {
        self.dir.path().join("run")
    }
}

/// A synthetic set and a run trained on it, shared across tests.
fn workspace() -> &'static Workspace {
    static W: OnceLock<Workspace> = OnceLock::new();
    W.get_or_init(|| {
        let w = Workspace { dir: tempfile::tempdir().unwrap() };
        std::fs::write(w.config(), TINY).unwrap();
        ok(&["synth", "--out", s(&w.dataset()), "--seed", "5", "--count", "5"]);
        ok(&["make-templates", "--dataset", s(&w.dataset()), "--out", s(&w.run()), "--config", s(&w.config())]);
        ok(&["train", "--dataset", s(&w.dataset()), "--out", s(&w.run()), "--config", s(&w.config())]);
        w
    })
}

#[test]
fn run_directory_holds_every_artifact() {
    let w = workspace();
    for f in ["config.json", "templates.json", "location.ckpt", "classifier.ckpt", "scale.ckpt", "deform.ckpt", "location_log.csv"] {
        assert!(w.run().join(f).exists(), "missing {f}");
    }
}

#[test]
fn sampling_is_seed_deterministic() {
    let w = workspace();
    let (run, data) = (w.run(), w.dataset());
    let args = ["sample", "--run", s(&run), "--dataset", s(&data), "--scene", "0002", "--count", "4", "--seed", "9"];
    let a = ok(&args);
    assert_eq!(a, ok(&args));
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert_eq!(v["scene"], "0002");
    let samples = v["samples"].as_array().unwrap();
    assert_eq!(samples.len(), 4);
    assert_eq!(samples[0]["keypoints"].as_array().unwrap().len(), 16);
    let mut other = args;
    other[10] = "10";
    assert_ne!(a, ok(&other));
}

#[test]
fn ground_truth_predictions_score_perfectly() {
    let w = workspace();
    let records = affordance::dataset::load_dataset(&w.dataset()).unwrap();
    let sets: Vec<serde_json::Value> = records
        .iter()
        .map(|r| {
            let samples: Vec<_> = r
                .poses
                .iter()
                .map(|p| {
                    let [x0, y0, x1, y1] = p.bbox();
                    serde_json::json!({
                        "center": [(x0 + x1) / 2.0, (y0 + y1) / 2.0],
                        "class": 0,
                        "scale": [1.0, 1.0],
                        "keypoints": p.keypoints,
                    })
                })
                .collect();
            serde_json::json!({"scene": r.id(), "samples": samples})
        })
        .collect();
    let pred = w.dir.path().join("gt_predictions.json");
    std::fs::write(&pred, serde_json::to_string(&sets).unwrap()).unwrap();
    let csv = w.dir.path().join("gt_eval.csv");
    ok(&["eval", "--dataset", s(&w.dataset()), "--predictions", s(&pred), "--out", s(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| row[header.iter().position(|h| *h == name).unwrap()].parse::<f64>().unwrap();
    assert_eq!(col("PCK"), 1.0);
    assert_eq!(col("AKD"), 0.0);
    assert!((col("IOU") - 1.0).abs() < 1e-9);
}

#[test]
fn eval_from_a_run_prints_a_table() {
    let w = workspace();
    let out = ok(&["eval", "--dataset", s(&w.dataset()), "--run", s(&w.run()), "--count", "1"]);
    for col in ["PCK", "PCKh", "AKD", "MAE", "MSE", "SIM", "IOU"] {
        assert!(out.contains(col), "{out}");
    }
}

#[test]
fn missing_checkpoint_names_the_head() {
    let w = workspace();
    let partial = w.dir.path().join("partial");
    std::fs::create_dir_all(&partial).unwrap();
    for f in ["config.json", "templates.json", "location.ckpt", "classifier.ckpt", "deform.ckpt"] {
        std::fs::copy(w.run().join(f), partial.join(f)).unwrap();
    }
    let err = fails(&["sample", "--run", s(&partial), "--dataset", s(&w.dataset()), "--scene", "0000"], "E_STATE");
    assert!(err.contains("scale"), "{err}");
}

#[test]
fn configuration_contradictions_exit_nonzero() {
    let w = workspace();
    let err = fails(
        &["train", "--dataset", s(&w.dataset()), "--out", s(&w.dir.path().join("x")), "--head", "classifier", "--fixed-template"],
        "E_CONFIG",
    );
    assert!(err.contains("classifier"));
    fails(&["train", "--dataset", s(&w.dataset()), "--out", "x", "--modality", "depth", "--labels", "3"], "E_CONFIG");
    fails(&["sample", "--run", s(&w.run()), "--dataset", s(&w.dataset()), "--scene", "nope"], "E_NOT_FOUND");
    fails(&["train", "--dataset", s(&w.dir.path().join("absent")), "--out", "x"], "E_NOT_FOUND");
    fails(&["train", "--mode", "sideways"], "E_USAGE");
    assert!(afford(&["--help"]).status.success());
}

#[test]
fn render_writes_a_png() {
    let w = workspace();
    let png = w.dir.path().join("overlay.png");
    ok(&["render", "--dataset", s(&w.dataset()), "--scene", "0001", "--out", s(&png)]);
    let bytes = std::fs::read(&png).unwrap();
    assert_eq!(&bytes[1..4], b"PNG");
    let sampled = w.dir.path().join("sampled.png");
    let json = w.dir.path().join("sampled.json");
    ok(&[
        "sample", "--run", s(&w.run()), "--dataset", s(&w.dataset()), "--scene", "0001", "--out", s(&json), "--render", s(&sampled),
    ]);
    assert!(sampled.exists());
    ok(&["render", "--dataset", s(&w.dataset()), "--scene", "0001", "--predictions", s(&json), "--out", s(&png)]);
}

#[test]
fn ablation_table_has_a_row_per_cell() {
    let w = workspace();
    let out = w.dir.path().join("ablate");
    let table = ok(&["ablate", "--out", s(&out), "--count", "5", "--draws", "1", "--config", s(&w.config())]);
    for mode in ["none", "self-image", "mutual"] {
        assert!(table.contains(&format!("{mode}/semantic")), "{table}");
    }
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 19);
}
