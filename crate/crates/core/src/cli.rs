//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::ExperimentConfig;
use crate::data::{load_idx, Dataset};
use crate::error::{Error, Result};
use crate::report::{aggregate, collect_run_dirs, write_csv, RunSummary};
use crate::rng::RngStream;
use crate::selection::{selection_protocol, NoProtocolObserver, ProtocolParams};
use crate::tensor::GradCheckSuite;
use crate::trainer::{evaluate_branches, train, Method, NoObserver};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Parser)]
#[command(name = "multida", version, about = "Train branched networks with multiple data augmentations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model and write metrics, summary and checkpoint to the run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// ours | single:NAME | baseline1 | baseline2 | noda
        #[arg(long)]
        method: Option<String>,
    },
    /// Accuracy of every branch of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// A config file (its test set) or a directory with images.idx and labels.idx.
        #[arg(long)]
        data: PathBuf,
    },
    /// Branch-selection protocol with R validation runs.
    Select {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Write augmented training samples as raw f32 tensors with JSON label sidecars.
    AugmentPreview {
        #[arg(long)]
        config: PathBuf,
        /// Output directory, relative to the run directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
    /// Finite-difference check of every primitive and a few random networks.
    Gradcheck {
        #[arg(long = "f64")]
        f64: bool,
        #[arg(long, default_value_t = 17)]
        seed: u64,
    },
    /// Aggregate run summaries into a mean ± std CSV.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn cli_main<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    if !path.is_file() {
        return Err(Error::config("--config", format!("{} is not a readable file", path.display())));
    }
    ExperimentConfig::load(path)
}

/// Holds `dir/.lock` for the lifetime of a run.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, method } => {
            let mut cfg = load_config(&config)?;
            if let Some(m) = method {
                cfg.train.method = m.parse::<Method>().map_err(|e| Error::config("--method", e.to_string()))?;
                cfg.validate()?;
            }
            let (train_set, test_set) = cfg.load_data()?;
            let dir = cfg.run.out_dir.clone();
            let _lock = RunLock::acquire(&dir)?;
            fs::write(dir.join("config.toml"), cfg.to_toml()?).map_err(|e| Error::io(&dir, e))?;
            let tc = cfg.train_config(&train_set);
            let out = train(&tc, &train_set, Some(&test_set), &mut NoObserver)?;
            out.metrics.write_jsonl(&dir.join("metrics.jsonl"))?;
            save_checkpoint(&out.model, &dir.join("model.mdac"))?;
            let summary = RunSummary::new(&cfg.run.name, out.metrics)?;
            summary.write(&dir)?;
            println!(
                "{}",
                serde_json::json!({ "method": summary.method, "accuracy": summary.accuracy, "branch_accuracy": summary.branch_accuracy })
            );
            Ok(())
        }
        Command::Eval { ckpt, data } => {
            let model = load_checkpoint::<f32>(&ckpt)?;
            let dataset = eval_data(&data)?;
            let acc = evaluate_branches(&model, &dataset)?;
            println!("{}", serde_json::json!({ "samples": dataset.len(), "accuracy": acc }));
            Ok(())
        }
        Command::Select { config, runs } => {
            let mut cfg = load_config(&config)?;
            if let Some(r) = runs {
                if r == 0 {
                    return Err(Error::config("--runs", "must be at least 1"));
                }
                cfg.protocol.runs = r;
            }
            if cfg.train.method != Method::Ours {
                return Err(Error::config("train.method", "selection needs method = \"ours\""));
            }
            let (train_set, test_set) = cfg.load_data()?;
            let dir = cfg.run.out_dir.clone();
            let _lock = RunLock::acquire(&dir)?;
            fs::write(dir.join("config.toml"), cfg.to_toml()?).map_err(|e| Error::io(&dir, e))?;
            let params = ProtocolParams {
                runs: cfg.protocol.runs,
                split_fraction: cfg.protocol.split_fraction,
                stratified: cfg.protocol.stratified,
                split_seed: cfg.protocol.seed,
            };
            let tc = cfg.train_config(&train_set);
            let out = selection_protocol(&tc, &train_set, params, Some(&test_set), &mut NoProtocolObserver)?;
            write_json(&dir.join("selection.json"), &out.report)?;
            save_checkpoint(&out.network, &dir.join("network.mdac"))?;
            save_checkpoint(&out.final_model, &dir.join("final.mdac"))?;
            out.final_metrics.write_jsonl(&dir.join("metrics.jsonl"))?;
            println!("{}", serde_json::to_string(&out.report)?);
            Ok(())
        }
        Command::AugmentPreview { config, out, count } => {
            let cfg = load_config(&config)?;
            let (train_set, _) = cfg.load_data()?;
            let dir = cfg.run.out_dir.join(out);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            augment_preview(&cfg, &train_set, count, &dir)
        }
        Command::Gradcheck { f64, seed } => {
            let suite = if f64 {
                GradCheckSuite::run_f64(seed)?
            } else {
                GradCheckSuite::run_f32(seed)?
            };
            print!("{}", suite.table());
            if suite.passed() {
                Ok(())
            } else {
                Err(Error::contract("gradient check failed"))
            }
        }
        Command::Report { runs, out } => {
            let dirs = collect_run_dirs(&runs)?;
            let summaries = dirs.iter().map(|d| RunSummary::read(d)).collect::<Result<Vec<_>>>()?;
            let rows = aggregate(&summaries);
            write_csv(&rows, &out)?;
            for r in rows {
                println!("{}: {:.2} ± {:.2} ({} runs)", r.name, r.accuracy_mean_pct, r.accuracy_std_pct, r.runs);
            }
            Ok(())
        }
    }
}

fn eval_data(path: &Path) -> Result<Dataset> {
    if path.is_dir() {
        return load_idx(&path.join("images.idx"), &path.join("labels.idx"));
    }
    if path.extension().is_some_and(|e| e == "toml") {
        return Ok(load_config(path)?.load_data()?.1);
    }
    Err(Error::config(
        "--data",
        format!("{} is neither a config file nor a directory with IDX files", path.display()),
    ))
}

#[derive(Serialize)]
struct PreviewSidecar {
    method: String,
    shape: [usize; 4],
    labels: Vec<Vec<f32>>,
    sample_ids: Vec<usize>,
}

/// Original and per-method augmented versions of the first `count` samples.
fn augment_preview(cfg: &ExperimentConfig, data: &Dataset, count: usize, dir: &Path) -> Result<()> {
    let count = count.min(data.len());
    if count == 0 {
        return Err(Error::config("--count", "must be positive"));
    }
    let [c, h, w] = data.image_shape();
    let ids: Vec<usize> = (0..count).collect();
    let partners = RngStream::derive(cfg.seeds.augment, "partner", 0, 0).permutation(count);
    let mut methods = vec![crate::augment::DaKind::None];
    methods.extend(cfg.train.da_set.iter().copied().filter(|&k| k != crate::augment::DaKind::None));
    for (k, kind) in methods.into_iter().enumerate() {
        let mut pixels: Vec<u8> = Vec::with_capacity(count * c * h * w * 4);
        let mut labels = Vec::with_capacity(count);
        for (j, &id) in ids.iter().enumerate() {
            let img = data.sample(id);
            let partner = data.sample(ids[partners[j]]);
            let mut rng = RngStream::derive(cfg.seeds.augment, &format!("view{k}"), 0, id as u64);
            let out = crate::augment::apply_da(kind, &img, &partner, &cfg.augment, &mut rng)?;
            for v in out.pixels.data() {
                pixels.extend_from_slice(&v.to_le_bytes());
            }
            labels.push(out.label);
        }
        let name = if kind == crate::augment::DaKind::None { "original" } else { kind.name() };
        let raw = dir.join(format!("{name}.f32"));
        fs::write(&raw, pixels).map_err(|e| Error::io(&raw, e))?;
        write_json(
            &dir.join(format!("{name}.json")),
            &PreviewSidecar {
                method: name.to_string(),
                shape: [count, c, h, w],
                labels,
                sample_ids: ids.clone(),
            },
        )?;
    }
    println!("wrote preview of {count} samples to {}", dir.display());
    Ok(())
}
