//! Declarative experiments: trace source, windows, model, training and
//! evaluation in one JSON document, plus grid sweeps over them.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Partition, SplitConfig, WindowConfig};
use crate::error::{Error, Result};
use crate::eval::{fan_chart_from, EvalReport, Forecasts, Timing};
use crate::models::{DecodeMode, Model, ModelConfig, ModelKind};
use crate::sim::{ingest_records, simulate_trace, SimConfig};
use crate::train::{derive_seed, train, Checkpoint, TrainConfig};

/// Environment variable that replaces every seed of a spec.
pub const SEED_ENV: &str = "OWDF_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TraceSource {
    Simulate(SimConfig),
    /// JSON-lines trace files, resolved against the spec's directory.
    Ingest(Vec<PathBuf>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Test window whose fan chart is embedded in the report.
    pub fan_chart_index: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            fan_chart_index: Some(0),
        }
    }
}

fn inherit_window(spec: &mut serde_json::Value) {
    let Some(window) = spec.get("window").cloned() else { return };
    let Some(model) = spec.get_mut("model").and_then(|m| m.as_object_mut()) else { return };
    for key in ["history_len", "horizon_len"] {
        if let Some(v) = window.get(key) {
            model.entry(key).or_insert_with(|| v.clone());
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    pub trace: TraceSource,
    pub window: WindowConfig,
    #[serde(default)]
    pub split: SplitConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalOptions,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentSpec {
    /// Parses a spec; `seed` overrides the nested simulator, split and
    /// training seeds, and a model without `history_len`/`horizon_len` takes
    /// them from `window`.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("experiment spec: {e}")))?;
        inherit_window(&mut value);
        let spec: Self = serde_json::from_value(value).map_err(|e| Error::Config(format!("experiment spec: {e}")))?;
        let seed = spec.seed;
        Ok(spec.with_seed(seed))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec = Self::from_json(&text)?;
        if let TraceSource::Ingest(files) = &mut spec.trace {
            let base = path.parent().unwrap_or(Path::new("."));
            for f in files.iter_mut() {
                if f.is_relative() {
                    *f = base.join(&*f);
                }
            }
        }
        Ok(spec)
    }

    /// Sets the simulator, split and training seeds to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.apply_seed();
        self
    }

    fn apply_seed(&mut self) {
        if let TraceSource::Simulate(sim) = &mut self.trace {
            sim.seed = self.seed;
        }
        self.split.seed = self.seed;
        self.train.seed = self.seed;
    }

    /// Applies [`SEED_ENV`] when set.
    pub fn with_env_seed(self) -> Result<Self> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                let seed = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
                Ok(self.with_seed(seed))
            }
            Err(_) => Ok(self),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.window.history_len != self.model.history_len || self.window.horizon_len != self.model.horizon_len {
            return Err(Error::Config(format!(
                "window {}:{} disagrees with model {}:{}",
                self.window.history_len, self.window.horizon_len, self.model.history_len, self.model.horizon_len
            )));
        }
        if let TraceSource::Simulate(sim) = &self.trace {
            sim.validate()?;
        }
        Ok(())
    }

    pub fn build_dataset(&self) -> Result<Dataset> {
        let (traces, names) = match &self.trace {
            TraceSource::Simulate(sim) => {
                let mut sim = sim.clone();
                sim.seed = self.seed;
                (vec![simulate_trace(&sim)?], vec!["trace0.jsonl".to_string()])
            }
            TraceSource::Ingest(files) => {
                let traces = files.iter().map(|f| ingest_records(f)).collect::<Result<Vec<_>>>()?;
                let names = (0..files.len()).map(|i| format!("trace{i}.jsonl")).collect();
                (traces, names)
            }
        };
        let split = SplitConfig {
            seed: self.seed,
            ..self.split.clone()
        };
        Dataset::prepare(traces, self.window, &split, names)
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub report: EvalReport,
    pub checkpoint: Checkpoint,
}

/// Trains on `dataset` and evaluates on its test split.
pub fn train_and_evaluate(spec: &ExperimentSpec, dataset: &Dataset) -> Result<ExperimentOutcome> {
    let mut model = Model::new(spec.model.clone(), spec.train.seed)?;
    let checkpoint = train(&mut model, dataset, &spec.train)?;
    let report = evaluate_model(&model, dataset, &spec.eval)?;
    let report = EvalReport {
        train_samples: dataset.refs(Partition::Train).len(),
        timing: Some(Timing {
            per_sample_train_seconds: checkpoint.history.per_sample_train_seconds,
            epochs: checkpoint.history.epochs.len(),
        }),
        ..report
    };
    Ok(ExperimentOutcome { report, checkpoint })
}

/// Full report of a trained model on the test split.
pub fn evaluate_model(model: &Model, dataset: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    let test = dataset.samples(Partition::Test);
    let forecasts = Forecasts::collect(model, &test, dataset.norm())?;
    let mut report = EvalReport::build(model, &forecasts)?;
    report.train_samples = dataset.refs(Partition::Train).len();
    if let Some(i) = opts.fan_chart_index {
        let sample = test
            .get(i)
            .ok_or_else(|| Error::Argument(format!("fan chart window {i} of {}", test.len())))?;
        report.fan_chart = Some(fan_chart_from(
            &forecasts.mixtures[i],
            sample,
            &dataset.norm().delay_transform(),
        )?);
    }
    Ok(report)
}

/// Simulate or ingest, prepare, train and evaluate.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    spec.validate()?;
    let dataset = spec.build_dataset()?;
    train_and_evaluate(spec, &dataset)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelVariant {
    pub kind: ModelKind,
    #[serde(default)]
    pub decode_mode: DecodeMode,
}

/// Axes of a sweep. Empty axes keep the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub models: Vec<ModelVariant>,
    /// `(history, horizon)` pairs.
    pub windows: Vec<(usize, usize)>,
    /// Caps on the train + validation window count.
    pub dataset_sizes: Vec<usize>,
    pub token_dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub base: ExperimentSpec,
    pub grid: SweepGrid,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_workers() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub index: usize,
    pub spec: ExperimentSpec,
}

impl SweepSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("sweep spec: {e}")))?;
        if let Some(base) = value.get_mut("base") {
            inherit_window(base);
        }
        let mut spec: Self = serde_json::from_value(value).map_err(|e| Error::Config(format!("sweep spec: {e}")))?;
        let seed = spec.base.seed;
        spec.base = spec.base.with_seed(seed);
        Ok(spec)
    }

    /// Cartesian product of the grid axes in a fixed order. Every cell shares
    /// the base data seed; model and training seeds are derived per cell.
    pub fn cells(&self) -> Vec<SweepCell> {
        fn axis<T: Clone>(v: &[T]) -> Vec<Option<T>> {
            if v.is_empty() {
                vec![None]
            } else {
                v.iter().cloned().map(Some).collect()
            }
        }
        let mut out = Vec::new();
        for w in axis(&self.grid.windows) {
            for size in axis(&self.grid.dataset_sizes) {
                for s in axis(&self.grid.token_dims) {
                    for m in axis(&self.grid.models) {
                        let mut spec = self.base.clone();
                        if let Some((h, l)) = w {
                            spec.window = WindowConfig {
                                history_len: h,
                                horizon_len: l,
                            };
                            spec.model.history_len = h;
                            spec.model.horizon_len = l;
                        }
                        if let Some(n) = size {
                            spec.split.pool_size = Some(n);
                        }
                        if let Some(s) = s {
                            spec.model.token_dim = s;
                        }
                        if let Some(m) = m {
                            spec.model.kind = m.kind;
                            spec.model.decode_mode = m.decode_mode;
                        }
                        spec.name = format!(
                            "{}-{}-h{}l{}-n{}-s{}",
                            spec.model.kind,
                            spec.model.decode_mode,
                            spec.window.history_len,
                            spec.window.horizon_len,
                            spec.split.pool_size.map_or("all".into(), |n| n.to_string()),
                            spec.model.token_dim
                        );
                        spec.train.seed = derive_seed(self.base.seed, out.len() as u64, 0);
                        out.push(SweepCell { index: out.len(), spec });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: usize,
    pub name: String,
    pub model: ModelKind,
    pub decode_mode: DecodeMode,
    pub history_len: usize,
    pub horizon_len: usize,
    pub train_samples: usize,
    pub token_dim: usize,
    pub param_count: usize,
    pub nll_mean: f64,
    pub nll_std_error: f64,
    pub mae_ms: f64,
    pub coverage_50: f64,
    pub coverage_90: f64,
    pub coverage_99: f64,
    pub per_sample_train_seconds: f64,
    pub epochs: usize,
}

impl SweepRow {
    pub fn from_report(cell: &SweepCell, r: &EvalReport) -> Self {
        let cov = |level: f64| {
            r.coverage
                .iter()
                .find(|(l, _)| (*l - level).abs() < 1e-12)
                .map_or(f64::NAN, |(_, c)| *c)
        };
        let timing = r.timing.clone().unwrap_or(Timing {
            per_sample_train_seconds: f64::NAN,
            epochs: 0,
        });
        SweepRow {
            cell: cell.index,
            name: cell.spec.name.clone(),
            model: cell.spec.model.kind,
            decode_mode: cell.spec.model.decode_mode,
            history_len: r.history_len,
            horizon_len: r.horizon_len,
            train_samples: r.train_samples,
            token_dim: r.token_dim,
            param_count: r.param_count,
            nll_mean: r.nll_mean,
            nll_std_error: r.nll_std_error,
            mae_ms: r.mae_ms,
            coverage_50: cov(0.5),
            coverage_90: cov(0.9),
            coverage_99: cov(0.99),
            per_sample_train_seconds: timing.per_sample_train_seconds,
            epochs: timing.epochs,
        }
    }
}

/// Runs every cell on at most `workers` threads. Results come back in cell
/// order whatever the completion order.
pub fn run_sweep<F>(spec: &SweepSpec, mut on_done: F) -> Result<Vec<(SweepCell, Result<ExperimentOutcome>)>>
where
    F: FnMut(&SweepCell, &Result<ExperimentOutcome>) + Send,
{
    if spec.workers == 0 {
        return Err(Error::Config("workers must be ≥ 1".into()));
    }
    let cells = spec.cells();
    for c in &cells {
        c.spec.validate()?;
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<ExperimentOutcome>>>> =
        Mutex::new((0..cells.len()).map(|_| None).collect());
    let callback = Mutex::new(&mut on_done);
    std::thread::scope(|scope| {
        for _ in 0..spec.workers.min(cells.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                let outcome = run_experiment(&cell.spec);
                (callback.lock().unwrap())(cell, &outcome);
                results.lock().unwrap()[i] = Some(outcome);
            });
        }
    });
    let results = results.into_inner().unwrap();
    Ok(cells
        .into_iter()
        .zip(results)
        .map(|(c, r)| (c, r.expect("every cell ran")))
        .collect())
}
