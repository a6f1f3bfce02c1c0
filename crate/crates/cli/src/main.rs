//! `owdf` command-line driver.

mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use owdf::dataset::{hash_records, Dataset, Partition, SplitConfig, WindowConfig};
use owdf::eval::EvalReport;
use owdf::experiment::{
    evaluate_model, run_sweep, train_and_evaluate, EvalOptions, ExperimentSpec, SweepRow, SweepSpec, SEED_ENV,
};
use owdf::models::{DecodeMode, Model, ModelConfig, ModelKind};
use owdf::sim::{simulate_trace, write_records, SimConfig};
use owdf::train::{train, Checkpoint, TrainConfig, CHECKPOINT_FILE, HISTORY_FILE};
use owdf::Error;

use plot::{PlotInput, PlotKind};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

#[derive(Parser)]
#[command(name = "owdf", version, about = "Probabilistic one-way delay forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace from a simulator config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Window and split one or more traces into a dataset directory.
    Prepare(PrepareArgs),
    /// Train a model on a prepared dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's test split.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Test window shown in the report's fan chart.
        #[arg(long, default_value_t = 0)]
        fan_chart_index: usize,
    },
    /// Run an experiment spec end to end.
    Run {
        #[arg(long)]
        spec: PathBuf,
        /// Defaults to the spec's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a grid of experiments.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's worker count.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Draw a figure from a report or sweep results.
    Plot {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum)]
        kind: PlotKind,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long, required = true, num_args = 1..)]
    trace: Vec<PathBuf>,
    #[arg(long)]
    history: usize,
    #[arg(long)]
    horizon: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    /// Cap on train + validation windows.
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_parser = parse_kind)]
    model: ModelKind,
    #[arg(long, value_parser = parse_decode)]
    decode: Option<DecodeMode>,
    #[arg(long)]
    token_dim: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// JSON model config; flags override its fields.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// JSON training config; flags override its fields.
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_decode(s: &str) -> Result<DecodeMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// A failed command: exit code plus message.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) => EXIT_USAGE,
        Error::Divergence { .. } | Error::NonFinite(_) => EXIT_DIVERGED,
        _ => EXIT_DATA,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<Value, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let name = command_name(&cli.command);
    match dispatch(cli.command) {
        Ok(mut status) => {
            status["command"] = json!(name);
            status["status"] = json!("ok");
            println!("{status}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("owdf {name}: {}", f.message);
            println!("{}", json!({"command": name, "status": "error", "exit_code": f.code, "message": f.message}));
            ExitCode::from(f.code)
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Simulate { .. } => "simulate",
        Command::Prepare(_) => "prepare",
        Command::Train(_) => "train",
        Command::Evaluate { .. } => "evaluate",
        Command::Run { .. } => "run",
        Command::Sweep { .. } => "sweep",
        Command::Plot { .. } => "plot",
    }
}

fn dispatch(c: Command) -> CmdResult {
    match c {
        Command::Simulate { config, out } => simulate(&config, &out),
        Command::Prepare(a) => prepare(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate {
            ckpt,
            dataset,
            out,
            fan_chart_index,
        } => evaluate(&ckpt, &dataset, &out, fan_chart_index),
        Command::Run { spec, out } => run(&spec, out),
        Command::Sweep { spec, out, workers } => sweep(&spec, &out, workers),
        Command::Plot { report, kind, out } => plot_cmd(&report, kind, &out),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure {
        code: EXIT_DATA,
        message: format!("cannot read {what} {}: {e}", path.display()),
    })?;
    serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{what} {}: {e}", path.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Failure {
            code: EXIT_DATA,
            message: format!("cannot create {}: {e}", parent.display()),
        })?;
    }
    fs::write(path, contents).map_err(|e| Failure {
        code: EXIT_DATA,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::usage(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn simulate(config: &Path, out: &Path) -> CmdResult {
    let mut cfg: SimConfig = read_json(config, "simulator config")?;
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    let records = simulate_trace(&cfg)?;
    write_records(out, &records)?;
    Ok(json!({
        "out": out,
        "records": records.len(),
        "seed": cfg.seed,
        "first_record_sha256": hash_records(&records[..records.len().min(1)])?,
    }))
}

fn prepare(a: PrepareArgs) -> CmdResult {
    let traces = a
        .trace
        .iter()
        .map(|p| owdf::sim::ingest_records(p))
        .collect::<Result<Vec<_>, _>>()?;
    let names = (0..traces.len()).map(|i| format!("trace{i}.jsonl")).collect();
    let split = SplitConfig {
        test_fraction: a.test_fraction,
        val_fraction: a.val_fraction,
        pool_size: a.pool_size,
        test_size: a.test_size,
        seed: env_seed()?.unwrap_or(a.seed),
    };
    let ds = Dataset::prepare(traces, WindowConfig::new(a.history, a.horizon)?, &split, names)?;
    ds.save(&a.out)?;
    Ok(json!({
        "out": a.out,
        "train": ds.refs(Partition::Train).len(),
        "val": ds.refs(Partition::Val).len(),
        "test": ds.refs(Partition::Test).len(),
    }))
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    let ds = Dataset::load(&a.dataset)?;
    let window = ds.window();
    let mut model_cfg = match &a.model_config {
        Some(p) => read_json(p, "model config")?,
        None => ModelConfig::new(a.model),
    };
    model_cfg.kind = a.model;
    model_cfg.history_len = window.history_len;
    model_cfg.horizon_len = window.horizon_len;
    if let Some(d) = a.decode {
        model_cfg.decode_mode = d;
    }
    if let Some(s) = a.token_dim {
        model_cfg.token_dim = s;
    }
    if let Some(p) = a.dropout {
        model_cfg.dropout = p;
    }
    let mut train_cfg: TrainConfig = match &a.train_config {
        Some(p) => read_json(p, "training config")?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.epochs {
        train_cfg.max_epochs = v;
    }
    if let Some(v) = a.lr {
        train_cfg.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        train_cfg.batch_size = v;
    }
    if let Some(v) = a.patience {
        train_cfg.patience = v;
    }
    if let Some(v) = a.seed {
        train_cfg.seed = v;
    }
    if let Some(v) = env_seed()? {
        train_cfg.seed = v;
    }
    let mut model = Model::new(model_cfg, train_cfg.seed)?;
    let ckpt = train(&mut model, &ds, &train_cfg)?;
    ckpt.save(&a.out)?;
    Ok(json!({
        "out": a.out,
        "checkpoint": a.out.join(CHECKPOINT_FILE),
        "history": a.out.join(HISTORY_FILE),
        "param_count": model.param_count(),
        "epochs": ckpt.history.epochs.len(),
        "best_epoch": ckpt.history.best_epoch,
        "best_val_nll": ckpt.history.best_val_nll,
    }))
}

fn csv_path(json_path: &Path) -> PathBuf {
    json_path.with_extension("csv")
}

fn write_report(report: &EvalReport, out: &Path) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(report).map_err(|e| Failure::from(Error::from(e)))?;
    write_file(out, text + "\n")?;
    write_file(&csv_path(out), report.to_csv())
}

fn report_status(report: &EvalReport, out: &Path) -> Value {
    json!({
        "out": out,
        "csv": csv_path(out),
        "samples": report.samples,
        "nll_mean": report.nll_mean,
        "nll_std_error": report.nll_std_error,
        "mae_ms": report.mae_ms,
    })
}

fn evaluate(ckpt: &Path, dataset: &Path, out: &Path, fan_chart_index: usize) -> CmdResult {
    let ckpt = Checkpoint::load(ckpt)?;
    let ds = Dataset::load(dataset)?;
    if ckpt.window != ds.window() || ckpt.norm != *ds.norm() {
        return Err(Error::Validation("checkpoint was trained on a different dataset".into()).into());
    }
    let model = ckpt.to_model()?;
    let opts = EvalOptions {
        fan_chart_index: Some(fan_chart_index),
    };
    let report = evaluate_model(&model, &ds, &opts)?;
    write_report(&report, out)?;
    Ok(report_status(&report, out))
}

fn run(spec_path: &Path, out: Option<PathBuf>) -> CmdResult {
    let spec = ExperimentSpec::load(spec_path)?.with_env_seed()?;
    let out = out
        .or_else(|| spec.output_dir.clone())
        .ok_or_else(|| Failure::usage("no --out given and the spec has no output_dir"))?;
    spec.validate()?;
    let ds = spec.build_dataset()?;
    ds.save(&out.join("dataset"))?;
    let outcome = train_and_evaluate(&spec, &ds)?;
    outcome.checkpoint.save(&out.join("ckpt"))?;
    let report_path = out.join("report.json");
    write_report(&outcome.report, &report_path)?;
    let mut status = report_status(&outcome.report, &report_path);
    status["seed"] = json!(spec.seed);
    Ok(status)
}

fn sweep(spec_path: &Path, out: &Path, workers: Option<usize>) -> CmdResult {
    let text = fs::read_to_string(spec_path).map_err(|e| Failure {
        code: EXIT_DATA,
        message: format!("cannot read sweep spec {}: {e}", spec_path.display()),
    })?;
    let mut spec = SweepSpec::from_json(&text)?;
    spec.base = spec.base.with_env_seed()?;
    if let Some(w) = workers {
        spec.workers = w;
    }
    let results = run_sweep(&spec, |cell, outcome| match outcome {
        Ok(o) => log::info!("cell {} {}: NLL {:.4}", cell.index, cell.spec.name, o.report.nll_mean),
        Err(e) => log::warn!("cell {} {} failed: {e}", cell.index, cell.spec.name),
    })?;

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut worst = 0u8;
    for (cell, outcome) in &results {
        match outcome {
            Ok(o) => {
                write_report(&o.report, &out.join("cells").join(&cell.spec.name).join("report.json"))?;
                rows.push(SweepRow::from_report(cell, &o.report));
            }
            Err(e) => {
                worst = worst.max(exit_code(e));
                failures.push(json!({"cell": cell.index, "name": cell.spec.name, "error": e.to_string()}));
            }
        }
    }
    let mut csv = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        csv.serialize(r).map_err(|e| Failure {
            code: EXIT_DATA,
            message: e.to_string(),
        })?;
    }
    let csv = csv.into_inner().map_err(|e| Failure {
        code: EXIT_DATA,
        message: e.to_string(),
    })?;
    write_file(&out.join("results.csv"), csv)?;
    let text = serde_json::to_string_pretty(&rows).map_err(|e| Failure::from(Error::from(e)))?;
    write_file(&out.join("results.json"), text + "\n")?;
    if worst != 0 {
        return Err(Failure {
            code: worst,
            message: format!("{} of {} cells failed: {}", failures.len(), results.len(), Value::Array(failures)),
        });
    }
    Ok(json!({"out": out, "cells": results.len(), "results": out.join("results.csv")}))
}

fn plot_cmd(report: &Path, kind: PlotKind, out: &Path) -> CmdResult {
    let text = fs::read_to_string(report).map_err(|e| Failure {
        code: EXIT_DATA,
        message: format!("cannot read report {}: {e}", report.display()),
    })?;
    let input = PlotInput::parse(&text).map_err(|e| Failure::usage(e.0))?;
    let fig = plot::render(kind, &input).map_err(|e| Failure::usage(e.0))?;
    write_file(out, &fig.svg)?;
    let csv = out.with_extension("csv");
    write_file(&csv, &fig.csv)?;
    Ok(json!({"out": out, "csv": csv}))
}
