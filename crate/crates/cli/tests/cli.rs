use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY_DATA: &[&str] = &[
    "--num-topics",
    "4",
    "--corpus-size",
    "200",
    "--num-queries",
    "20",
    "--pairs-per-query",
    "5",
    "--vocab-size",
    "40",
    "--vision-dim",
    "4",
    "--eval-queries",
    "8",
    "--eval-positives-per-query",
    "4",
];

const TINY_MODEL: &[&str] = &[
    "--token-dim",
    "4",
    "--vision-hidden",
    "8",
    "--embed-dim",
    "8",
    "--heads",
    "2",
    "--ms-count",
    "2",
    "--batch-size",
    "16",
];

fn mbvr(runs: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mbvr"))
        .arg("--runs-dir")
        .arg(runs)
        .args(args)
        .output()
        .expect("binary runs")
}

fn success_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout.clone()).unwrap();
    assert_eq!(stdout.lines().count(), 1, "{stdout}");
    serde_json::from_str(&stdout).unwrap()
}

fn error_json(out: &Output) -> Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    let last = stderr.lines().last().expect("an error line");
    serde_json::from_str(last).unwrap()
}

fn gen_data(runs: &Path) -> PathBuf {
    let out = mbvr(runs, &[&["gen-data"], TINY_DATA].concat());
    PathBuf::from(success_json(&out)["path"].as_str().unwrap())
}

#[test]
fn full_pipeline_writes_stamped_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path();
    let data = gen_data(runs);
    assert!(data.starts_with(runs));
    let data = data.to_str().unwrap();

    let train_args = [
        &["train", "--data", data, "--epochs", "2", "--variant", "mbvr"],
        TINY_MODEL,
    ]
    .concat();
    let trained = success_json(&mbvr(runs, &train_args));
    let run_dir = PathBuf::from(trained["run_dir"].as_str().unwrap());
    let hash = trained["config_hash"].as_str().unwrap();
    assert!(run_dir.ends_with(hash));
    assert_eq!(trained["checkpoints"].as_array().unwrap().len(), 2);
    for name in ["epoch_0.ckpt", "epoch_1.ckpt", "loss_curve.tsv", "config.toml"] {
        assert!(run_dir.join(name).exists(), "{name}");
    }
    let stamp = format!("# config={hash} seed=0 variant=mbvr");
    let curve = fs::read_to_string(run_dir.join("loss_curve.tsv")).unwrap();
    assert!(curve.starts_with(&stamp));

    // Same flags address the same run directory and its final checkpoint.
    let eval_args = [
        &[
            "eval",
            "--data",
            data,
            "--epochs",
            "2",
            "--variant",
            "mbvr",
            "--k",
            "5,10",
        ],
        TINY_MODEL,
    ]
    .concat();
    let eval = success_json(&mbvr(runs, &eval_args));
    assert_eq!(eval["rows"].as_array().unwrap().len(), 2 * 3 + 2);
    let report = fs::read_to_string(run_dir.join("metrics.tsv")).unwrap();
    assert!(report.starts_with(&stamp));
    let again = success_json(&mbvr(runs, &eval_args));
    assert_eq!(again, eval);

    let analyze_args = [
        &["analyze", "--data", data, "--epochs", "2", "--variant", "mbvr"],
        TINY_MODEL,
    ]
    .concat();
    let diag = success_json(&mbvr(runs, &analyze_args));
    let overlap = diag["overlap_stat"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&overlap));
    for name in ["rvt_histogram.tsv", "scores.tsv", "diagnostics.tsv"] {
        let text = fs::read_to_string(run_dir.join(name)).unwrap();
        assert!(text.starts_with(&stamp), "{name}");
    }
}

#[test]
fn ablate_writes_a_six_row_table() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path();
    let data = gen_data(runs);
    let args = [
        &["ablate", "--data", data.to_str().unwrap(), "--epochs", "1"],
        TINY_MODEL,
    ]
    .concat();
    let out = success_json(&mbvr(runs, &args));
    assert!(out["failed_variants"].as_array().unwrap().is_empty());
    let table = fs::read_to_string(out["table"].as_str().unwrap()).unwrap();
    let rows: Vec<&str> = table.lines().skip(2).collect();
    let names: Vec<&str> = rows.iter().map(|r| r.split('\t').next().unwrap()).collect();
    assert_eq!(
        names,
        ["text_only", "vision_only", "base", "base+ms", "base+dm", "mbvr"]
    );
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path();
    let data = gen_data(runs);
    let config = runs.join("settings.toml");
    fs::write(
        &config,
        "[train]\nepochs = 3\nvariant = \"base\"\nlearning_rate = 0.01\n[train.loss]\ngamma = 0.5\n",
    )
    .unwrap();
    let args = [
        &[
            "--config",
            config.to_str().unwrap(),
            "train",
            "--data",
            data.to_str().unwrap(),
            "--epochs",
            "1",
        ],
        TINY_MODEL,
    ]
    .concat();
    let out = success_json(&mbvr(runs, &args));
    assert_eq!(out["epoch_mean_loss"].as_array().unwrap().len(), 1);
    let run_dir = PathBuf::from(out["run_dir"].as_str().unwrap());
    let saved = fs::read_to_string(run_dir.join("config.toml")).unwrap();
    assert!(saved.contains("variant = \"base\""));
    assert!(saved.contains("learning_rate = 0.01"));
    assert!(saved.contains("gamma = 0.5"));
    assert!(saved.contains("epochs = 1"));
}

#[test]
fn failures_emit_one_machine_readable_line() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path();

    let missing = error_json(&mbvr(runs, &["train", "--data", "/nonexistent/data.bin"]));
    assert_eq!(missing["error"]["kind"], "io");

    let data = gen_data(runs);
    let mut bytes = fs::read(&data).unwrap();
    bytes[0] ^= 0xff;
    let corrupt = runs.join("corrupt.bin");
    fs::write(&corrupt, bytes).unwrap();
    let err = error_json(&mbvr(runs, &["eval", "--data", corrupt.to_str().unwrap()]));
    assert_eq!(err["error"]["kind"], "format");
    assert!(err["error"]["message"].as_str().unwrap().contains("byte 0"));

    let usage = error_json(&mbvr(runs, &["train", "--data", "x", "--variant", "nope"]));
    assert_eq!(usage["error"]["kind"], "usage");

    let bad_config = runs.join("bad.toml");
    fs::write(&bad_config, "[train]\nbatch_size = 1\n").unwrap();
    let err = error_json(&mbvr(
        runs,
        &[
            "--config",
            bad_config.to_str().unwrap(),
            "train",
            "--data",
            data.to_str().unwrap(),
        ],
    ));
    assert_eq!(err["error"]["kind"], "config");

    let diverge = [
        &[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--variant",
            "base",
            "--alpha",
            "1e308",
            "--beta",
            "1e308",
        ],
        TINY_MODEL,
    ]
    .concat();
    let err = error_json(&mbvr(runs, &diverge));
    assert_eq!(err["error"]["kind"], "non_finite_loss");
}
