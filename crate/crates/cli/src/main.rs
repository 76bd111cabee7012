mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::Value;

use commands::*;

#[derive(Parser)]
#[command(name = "wali", version, about = "Worst-case face morph generation and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON or TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set training.batch_size=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Defaults to `out/<command>`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

/// Shorthand flags that map onto config keys.
#[derive(Args, Clone, Default)]
struct Inputs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    registry: Option<PathBuf>,
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    protocol: Option<PathBuf>,
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    samples: Option<PathBuf>,
}

#[derive(Args)]
struct CmdArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    inputs: Inputs,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic identity dataset.
    SynthData(Common),
    /// Train a toy FR embedder and register it.
    TrainFr(CmdArgs),
    /// Calibrate a registered backend's threshold at a target FMR.
    Calibrate(CmdArgs),
    /// Adversarial (baseline) WALI training.
    TrainWali(CmdArgs),
    /// Finetune a baseline with FR-aware losses.
    FinetuneWali(CmdArgs),
    /// Two-phase latent optimization over a morph protocol.
    GenMorphs(CmdArgs),
    /// MMPMR of a score table or a morph directory.
    EvalMmpmr(CmdArgs),
    /// Worst-case embedding bound per backend.
    EvalBound(CmdArgs),
    /// Train an S-MAD or D-MAD detector.
    MadTrain(CmdArgs),
    /// Score a detector and report BPCER at an APCER bound.
    MadEval(CmdArgs),
    /// DET points from FR or MAD scores.
    DetExport(CmdArgs),
}

impl Inputs {
    fn overrides(&self, backend_key: &str) -> Vec<(String, Value)> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| Value::String(p.display().to_string()));
        let mut out = Vec::new();
        for (k, v) in [
            ("dataset", path(&self.dataset)),
            ("registry", path(&self.registry)),
            ("model", path(&self.model)),
            ("protocol", path(&self.protocol)),
            ("scores", path(&self.scores)),
            ("samples", path(&self.samples)),
            ("threshold", self.threshold.map(Value::from)),
            (backend_key, self.backend.as_ref().map(|b| backend_value(backend_key, b))),
        ] {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        }
        out
    }
}

/// Keys ending in `s` take a comma-separated list.
fn backend_value(key: &str, v: &str) -> Value {
    if key.ends_with('s') {
        Value::Array(v.split(',').map(|b| Value::String(b.trim().to_string())).collect())
    } else {
        Value::String(v.to_string())
    }
}

fn resolve<T: DeserializeOwned>(c: &Common, mut overrides: Vec<(String, Value)>) -> anyhow::Result<T> {
    for s in &c.set {
        overrides.push(config::parse_override(s)?);
    }
    if let Some(seed) = c.seed {
        overrides.push(("seed".into(), Value::from(seed)));
    }
    config::load(c.config.as_deref(), &overrides)
}

fn out_dir(c: &Common, name: &str) -> PathBuf {
    c.out_dir.clone().unwrap_or_else(|| Path::new("out").join(name))
}

fn run<T: DeserializeOwned>(
    a: &CmdArgs,
    name: &str,
    backend_key: &str,
    f: impl Fn(&T, &Path) -> anyhow::Result<()>,
) -> anyhow::Result<()> {
    let cfg: T = resolve(&a.common, a.inputs.overrides(backend_key))?;
    f(&cfg, &out_dir(&a.common, name))
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::SynthData(c) => {
            let cfg: SynthConfig = resolve(&c, Vec::new())?;
            synth_data(&cfg, &out_dir(&c, "synth-data"))
        }
        Command::TrainFr(a) => run(&a, "train-fr", "id", train_fr),
        Command::Calibrate(a) => run(&a, "calibrate", "backend", calibrate),
        Command::TrainWali(a) => run(&a, "train-wali", "backend", train_wali),
        Command::FinetuneWali(CmdArgs { common: c, inputs: i }) => {
            let mut o = i.overrides("backend");
            // `--model` names the baseline checkpoint here.
            if let Some(p) = &i.model {
                o.retain(|(k, _)| k != "model");
                o.push(("baseline".into(), Value::String(p.display().to_string())));
            }
            finetune_wali(&resolve(&c, o)?, &out_dir(&c, "finetune-wali"))
        }
        Command::GenMorphs(a) => run(&a, "gen-morphs", "selection_backend", gen_morphs),
        Command::EvalMmpmr(a) => run(&a, "eval-mmpmr", "backends", eval_mmpmr),
        Command::EvalBound(a) => run(&a, "eval-bound", "backends", eval_bound),
        Command::MadTrain(a) => run(&a, "mad-train", "backend", mad_train),
        Command::MadEval(a) => run(&a, "mad-eval", "backend", mad_eval),
        Command::DetExport(a) => run(&a, "det-export", "backend", det_export),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
