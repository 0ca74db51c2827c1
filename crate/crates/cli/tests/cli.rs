use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn conformer(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conformer"))
        .current_dir(dir)
        .env_remove("CONFORMER_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_exit(o: &Output, code: i32) {
    assert_eq!(o.status.code(), Some(code), "stderr: {}", stderr(o));
}

const TINY: [&str; 14] = [
    "--d", "8", "--heads", "2", "--input-len", "48", "--pred-len", "24", "--max-epochs", "1", "--train-stride", "8",
    "--eval-samples", "2",
];

fn synth(dir: &Path) {
    let o = conformer(dir, &["synth", "--seed", "7", "--L", "2000", "--dx", "4", "--out", "data.csv"]);
    assert_exit(&o, 0);
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

#[test]
fn synth_train_eval_predict_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    let data = csv_rows(&dir.join("data.csv"));
    assert_eq!(data[0], ["date", "x0", "x1", "x2", "x3"]);
    assert_eq!(data.len(), 2001);

    let mut args = vec!["train", "--data", "data.csv", "--out-dir", "run"];
    args.extend(TINY);
    assert_exit(&conformer(dir, &args), 0);
    let history = csv_rows(&dir.join("run/history.csv"));
    assert_eq!(history[0], ["epoch", "train_loss", "val_mse", "val_mae"]);
    assert_eq!(history.len(), 2);

    let o = conformer(dir, &["eval", "--checkpoint", "run/checkpoint", "--predictions", "pred.csv"]);
    assert_exit(&o, 0);
    let metrics = csv_rows(&dir.join("run/metrics.csv"));
    let heads: Vec<&str> = metrics[1..].iter().map(|r| r[1].as_str()).collect();
    assert_eq!(heads, ["decoder", "flow", "fused", "persistence"]);
    for r in &metrics[1..] {
        assert!(r[2].parse::<f64>().unwrap().is_finite());
    }
    let pred = csv_rows(&dir.join("pred.csv"));
    assert_eq!(pred[0].last().unwrap(), "target");

    let o = conformer(dir, &["predict", "--checkpoint", "run/checkpoint", "--data", "data.csv", "--out", "f.csv", "--samples", "3"]);
    assert_exit(&o, 0);
    let f = csv_rows(&dir.join("f.csv"));
    assert_eq!(f[0], ["window_start", "horizon_step", "variable", "y_dec", "z_out", "fused", "variance"]);
    assert_eq!(f.len(), 1 + 24 * 4);
    assert!(f[1..].iter().all(|r| r[6].parse::<f64>().unwrap() >= 0.0));
}

#[test]
fn eval_without_checkpoint_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [&["eval"][..], &["eval", "--checkpoint", "missing"][..]] {
        let o = conformer(tmp.path(), args);
        assert_exit(&o, 1);
        let e = stderr(&o);
        assert_eq!(e.trim_end().lines().count(), 1, "{e}");
        assert!(e.starts_with("eval: "), "{e}");
    }
}

#[test]
fn short_series_exits_with_data_code() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let o = conformer(dir, &["synth", "--L", "10", "--dx", "2", "--out", "short.csv"]);
    assert_exit(&o, 0);
    let o = conformer(dir, &["train", "--data", "short.csv", "--input-len", "48"]);
    assert_exit(&o, 2);
    let e = stderr(&o);
    assert!(e.starts_with("train: ") && e.contains("series too short"), "{e}");
    assert_eq!(e.trim_end().lines().count(), 1);
}

#[test]
fn odd_window_in_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.json"), r#"{"w": 3}"#).unwrap();
    let o = conformer(tmp.path(), &["train", "--config", "c.json", "--data", "x.csv"]);
    assert_exit(&o, 1);
    assert!(stderr(&o).contains("window size must be even"));
    let o = conformer(tmp.path(), &["train", "--w", "5", "--data", "x.csv"]);
    assert_exit(&o, 1);
}

#[test]
fn config_errors_use_the_usage_code() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.json"), r#"{"lamda": 0.5}"#).unwrap();
    let o = conformer(tmp.path(), &["train", "--config", "bad.json", "--data", "x.csv"]);
    assert_exit(&o, 1);
    assert!(stderr(&o).contains("lamda"));
    assert_exit(&conformer(tmp.path(), &["train", "--lambda", "1.5", "--data", "x.csv"]), 1);
    assert_exit(&conformer(tmp.path(), &["frobnicate"]), 1);
    // an empty config is all defaults, so the run proceeds to loading data
    fs::write(tmp.path().join("empty.json"), "").unwrap();
    let o = conformer(tmp.path(), &["train", "--config", "empty.json", "--data", "missing.csv"]);
    assert_exit(&o, 2);
}

#[test]
fn flags_override_file_and_environment_sets_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    fs::write(dir.join("c.json"), r#"{"lambda": 0.5, "seed": 1}"#).unwrap();
    let mut args = vec!["train", "--config", "c.json", "--lambda", "0.8", "--data", "data.csv"];
    args.extend(TINY);
    let o = Command::new(env!("CARGO_BIN_EXE_conformer"))
        .current_dir(dir)
        .env("CONFORMER_SEED", "99")
        .args(&args)
        .output()
        .unwrap();
    assert_exit(&o, 0);
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("run/checkpoint/run.json")).unwrap()).unwrap();
    assert_eq!(run["lambda"], 0.8);
    assert_eq!(run["seed"], 99);
    assert_eq!(run["target"], "x3");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("run/checkpoint/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["lambda"], 0.8);
    assert_eq!(manifest["format_version"], 1);
}

#[test]
fn training_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    for out in ["a", "b"] {
        let mut args = vec!["train", "--data", "data.csv", "--out-dir", out, "--seed", "5"];
        args.extend(TINY);
        assert_exit(&conformer(dir, &args), 0);
    }
    for file in ["history.csv", "checkpoint/params.bin", "checkpoint/manifest.json"] {
        assert_eq!(fs::read(dir.join("a").join(file)).unwrap(), fs::read(dir.join("b").join(file)).unwrap(), "{file}");
    }
}

#[test]
fn bench_writes_one_row_per_length_and_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let o = conformer(tmp.path(), &["bench", "--lengths", "32,64,128", "--trials", "4", "--warmup", "1", "--w", "8", "--out", "b.csv"]);
    assert_exit(&o, 0);
    let rows = csv_rows(&tmp.path().join("b.csv"));
    assert_eq!(rows[0], ["L", "variant", "mean_ms", "peak_bytes"]);
    assert_eq!(rows.len(), 1 + 6);
    // the counting allocator is installed in the binary
    assert!(rows[1..].iter().all(|r| r[3].parse::<u64>().unwrap() > 0));
}
