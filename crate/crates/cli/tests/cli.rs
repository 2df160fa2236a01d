use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mixopt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixopt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mixopt(args);
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

const SMALL_TRAIN: [&str; 10] = [
    "--steps", "120", "--eval-interval", "40", "--batch-size", "32", "--hidden", "16", "--bins", "32",
];

fn generate(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    ok(&[
        "gen", "--kind", "operator_tiers", "--seed", "3", "--out", p(&data), "--trajectories", "12", "--steps", "20",
    ]);
    data
}

#[test]
fn stages_chain_from_generation_to_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path());
    assert!(data.join("manifest.json").exists());

    let reference = dir.path().join("ref");
    let mut args = vec!["train-ref", "--data", p(&data), "--out", p(&reference), "--delta", "0.1", "--seed", "1"];
    args.extend(SMALL_TRAIN);
    let printed = ok(&args);
    assert!(printed.contains("selected step"), "{printed}");
    assert!(reference.join("reference.json").exists());
    assert!(reference.join("records.csv").exists());

    let dro = dir.path().join("dro");
    let printed = ok(&[
        "dro", "--data", p(&data), "--ref", p(&reference), "--out", p(&dro), "--eta", "0.1", "--smoothing", "0.001",
        "--steps", "60", "--seed", "1",
    ]);
    assert_eq!(printed.lines().count(), 6, "{printed}");
    let weights = dro.join("weights.json");
    let parsed: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(&weights).unwrap()).unwrap();
    assert_eq!(parsed.len(), 6);
    assert!((parsed.values().map(|v| v.as_f64().unwrap()).sum::<f64>() - 1.0).abs() < 1e-9);

    let subset = dir.path().join("subset");
    ok(&[
        "subset", "--data", p(&data), "--weights", p(&weights), "--fraction", "0.25", "--seed", "2", "--out",
        p(&subset),
    ]);
    assert!(subset.join("manifest.json").exists());
    assert!(subset.join("retention_plan.json").exists());

    let report = dir.path().join("report");
    let uniform = dir.path().join("uniform.json");
    let flat: serde_json::Map<String, serde_json::Value> =
        parsed.keys().map(|n| (n.clone(), serde_json::json!(1.0 / 6.0))).collect();
    fs::write(&uniform, serde_json::to_string(&flat).unwrap()).unwrap();
    let table = ok(&[
        "report", "--weights", p(&uniform), p(&weights), "--names", "uniform", "dro", "--out", p(&report),
    ]);
    assert!(table.starts_with("method"), "{table}");
    assert!(report.join("weights.txt").exists());
    assert!(report.join("weights.csv").exists());
}

#[test]
fn mismatched_bins_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path());
    let reference = dir.path().join("ref");
    let mut args = vec!["train-ref", "--data", p(&data), "--out", p(&reference), "--seed", "0"];
    args.extend(SMALL_TRAIN);
    ok(&args);

    let out = mixopt(&[
        "dro", "--data", p(&data), "--ref", p(&reference), "--out", p(&dir.path().join("dro")), "--steps", "10",
        "--bins", "64",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bad_arguments_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = mixopt(&["gen", "--kind", "noise_pair", "--out", p(&dir.path().join("d")), "--trajectories", "0"]);
    assert_eq!(out.status.code(), Some(2));
    let out = mixopt(&["subset", "--data", p(&dir.path().join("missing")), "--weights", "w.json", "--fraction", "0.5", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path());
    let config = |out: &str| {
        format!(
            r#"{{"data": "data", "out": "{out}", "seed": 5, "preprocess": {{"bins": 32}},
                "train": {{"total_steps": 100, "eval_interval": 50, "batch_size": 32, "hidden": [16]}},
                "dro_steps": 50, "subset_fraction": 0.5}}"#
        )
    };
    for name in ["a", "b"] {
        let path = dir.path().join(format!("{name}.json"));
        fs::write(&path, config(name)).unwrap();
        ok(&["run", "--config", p(&path)]);
    }
    for file in ["weights.json", "subset/retention_plan.json", "report/weights.csv"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs");
    }
}
