use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use multida::cli::{RunLock, EXIT_CONFIG, EXIT_RUNTIME, LOCK_FILE};
use multida::data::{gen_glyphs, save_idx};
use multida::report::RunSummary;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_multida"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, method: &str, extra: &str) -> PathBuf {
    let path = dir.join(format!("{name}.toml"));
    fs::write(
        &path,
        format!(
            r#"[run]
name = "{name}"
out_dir = "runs/{name}"

[data]
classes = 4
train_size = 96
test_size = 40
size = 8
noise = 0.2

[model]
arch = "tiny_mlp"
hidden = 16

[train]
method = "{method}"
epochs = 3
batch_size = 16

[optim]
base_lr = 0.05
{extra}"#
        ),
    )
    .unwrap();
    path
}

#[test]
fn help_and_usage_errors() {
    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("augment-preview"));
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    let o = run(&["train"]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    assert!(stderr(&o).contains("--config"));
}

#[test]
fn config_errors_exit_with_one_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));

    let bad = write_config(dir.path(), "bad", "ours", "[train2]\nx = 1\n");
    let o = run(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    assert!(stderr(&o).contains("train2"), "{}", stderr(&o));

    let typo = dir.path().join("typo.toml");
    fs::write(&typo, "[train]\nepochz = 3\n").unwrap();
    let o = run(&["train", "--config", typo.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    assert!(stderr(&o).contains("train.epochz"), "{}", stderr(&o));

    let ok = write_config(dir.path(), "m", "ours", "");
    let o = run(&["train", "--config", ok.to_str().unwrap(), "--method", "single:warp"]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    assert!(stderr(&o).contains("--method"));
}

#[test]
fn train_eval_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut run_dirs = Vec::new();
    for (name, method) in [("ours", "ours"), ("noda", "noda")] {
        let cfg = write_config(dir.path(), name, method, "");
        let o = run(&["train", "--config", cfg.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let out = dir.path().join("runs").join(name);
        for file in ["config.toml", "metrics.jsonl", "summary.json", "model.mdac"] {
            assert!(out.join(file).is_file(), "{name}: missing {file}");
        }
        assert!(!out.join(LOCK_FILE).exists());
        let lines = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 3);
        for line in lines.lines() {
            let record: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(record["lr"].is_number());
        }
        let summary = RunSummary::read(&out).unwrap();
        assert_eq!(summary.method, method);
        assert_eq!(summary.branch_accuracy.len(), if method == "ours" { 3 } else { 1 });
        run_dirs.push(out);
    }

    // Evaluate against the config's test set and against IDX files.
    let ckpt = run_dirs[0].join("model.mdac");
    let cfg = dir.path().join("ours.toml");
    let o = run(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["samples"], 40);
    assert_eq!(v["accuracy"].as_array().unwrap().len(), 3);

    let idx = dir.path().join("idx");
    fs::create_dir(&idx).unwrap();
    let ds = gen_glyphs(4, 24, 8, 0.2, 3).unwrap();
    save_idx(&ds, &idx.join("images.idx"), &idx.join("labels.idx")).unwrap();
    let o = run(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", idx.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("\"samples\":24"));

    let o = run(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", dir.path().join("nowhere").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));

    let csv = dir.path().join("report.csv");
    let runs = dir.path().join("runs");
    let o = run(&["report", "--runs", runs.to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("name,method,runs,accuracy_mean_pct,accuracy_std_pct\n"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.mdac");
    fs::write(&ckpt, b"MDAC\x63\x00\x00\x00").unwrap();
    let cfg = write_config(dir.path(), "e", "ours", "");
    let o = run(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(EXIT_RUNTIME));
    assert!(stderr(&o).contains("version"), "{}", stderr(&o));
}

#[test]
fn locked_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "locked", "noda", "");
    let out = dir.path().join("runs/locked");
    let lock = RunLock::acquire(&out).unwrap();
    let o = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(EXIT_RUNTIME));
    assert!(stderr(&o).contains("locked"));
    drop(lock);
    assert!(!out.join(LOCK_FILE).exists());
    let o = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn select_writes_report_and_network() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sel", "ours", "");
    let o = run(&["select", "--config", cfg.to_str().unwrap(), "--runs", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("runs/sel");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("selection.json")).unwrap()).unwrap();
    assert_eq!(report["val_accuracy"].as_array().unwrap().len(), 2);
    assert!(report["test_accuracy"].is_number());
    let net = multida::checkpoint::load_checkpoint::<f32>(&out.join("network.mdac")).unwrap();
    assert_eq!(net.num_branches(), 1);

    let o = run(&["select", "--config", cfg.to_str().unwrap(), "--runs", "0"]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    let single = write_config(dir.path(), "one", "noda", "");
    let o = run(&["select", "--config", single.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
}

#[test]
fn augment_preview_writes_tensors_and_sidecars() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "prev", "ours", "");
    let o = run(&["augment-preview", "--config", cfg.to_str().unwrap(), "--out", "preview", "--count", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("runs/prev/preview");
    for name in ["original", "randaugment", "mixup", "cutmix"] {
        let raw = fs::read(out.join(format!("{name}.f32"))).unwrap();
        assert_eq!(raw.len(), 5 * 64 * 4, "{name}");
        let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join(format!("{name}.json"))).unwrap()).unwrap();
        assert_eq!(side["shape"], serde_json::json!([5, 1, 8, 8]));
        for label in side["labels"].as_array().unwrap() {
            let s: f64 = label.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn gradcheck_prints_a_passing_table() {
    for args in [&["gradcheck"][..], &["gradcheck", "--f64"][..]] {
        let o = run(args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let text = stdout(&o);
        assert!(text.contains("conv2d/stride2"));
        assert!(text.contains(", 0 failed"));
    }
}
