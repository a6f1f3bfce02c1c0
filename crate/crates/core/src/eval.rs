//! Test-split metrics: NLL, MAE, coverage, calibration and per-group NLL.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, NormStats, Partition, WindowSample};
use crate::error::{Error, Result};
use crate::mdn::{components_ms, AffineTransform, ComponentMs, MixtureParams};
use crate::models::Model;

pub const COVERAGE_LEVELS: [f64; 4] = [0.5, 0.7, 0.9, 0.99];
pub const FAN_LEVELS: [f64; 4] = [0.5, 0.7, 0.9, 0.99];
pub const NLL_DEFINITION: &str =
    "mean over samples of the per-step mean of -ln p(y) for standardised delay targets, natural log";
pub const POINT_ESTIMATE: &str = "mixture_mean";

/// Nominal levels 0.05, 0.10, …, 0.95 and 0.99.
pub fn default_curve_grid() -> Vec<f64> {
    let mut grid: Vec<f64> = (1..=19).map(|i| i as f64 * 0.05).collect();
    grid.push(0.99);
    grid
}

/// Predicted mixtures and observed targets of every `(sample, step)` pair.
#[derive(Clone, Debug)]
pub struct Forecasts {
    pub mixtures: Vec<Vec<MixtureParams>>,
    pub targets_std: Vec<Vec<f64>>,
    /// Inter-arrival time of each window's newest record.
    pub groups: Vec<f64>,
    pub transform: AffineTransform,
}

impl Forecasts {
    pub fn new(
        mixtures: Vec<Vec<MixtureParams>>,
        targets_std: Vec<Vec<f64>>,
        groups: Vec<f64>,
        transform: AffineTransform,
    ) -> Result<Self> {
        if mixtures.is_empty() {
            return Err(Error::InsufficientData("evaluation split is empty".into()));
        }
        if mixtures.len() != targets_std.len()
            || groups.len() != mixtures.len()
            || mixtures.iter().zip(&targets_std).any(|(m, t)| m.len() != t.len() || m.is_empty())
        {
            return Err(Error::shape("forecasts", "mixtures, targets and groups disagree"));
        }
        Ok(Forecasts {
            mixtures,
            targets_std,
            groups,
            transform,
        })
    }

    /// Runs `model` in inference mode over `samples`.
    pub fn collect(model: &Model, samples: &[WindowSample<'_>], norm: &NormStats) -> Result<Self> {
        let mut mixtures = Vec::with_capacity(samples.len());
        let mut targets = Vec::with_capacity(samples.len());
        let mut groups = Vec::with_capacity(samples.len());
        for s in samples {
            mixtures.push(model.predict(s.history, norm)?);
            targets.push(s.future_delays_ms().map(|y| norm.delay.standardize(y)).collect());
            groups.push(s.last().inter_arrival_ms);
        }
        Self::new(mixtures, targets, groups, norm.delay_transform())
    }

    pub fn from_dataset(model: &Model, dataset: &Dataset, part: Partition) -> Result<Self> {
        Self::collect(model, &dataset.samples(part), dataset.norm())
    }

    pub fn samples(&self) -> usize {
        self.mixtures.len()
    }

    pub fn horizon(&self) -> usize {
        self.mixtures[0].len()
    }

    fn pairs(&self) -> impl Iterator<Item = (&MixtureParams, f64)> {
        self.mixtures
            .iter()
            .zip(&self.targets_std)
            .flat_map(|(m, t)| m.iter().zip(t.iter().copied()))
    }

    fn sample_nll(&self, i: usize) -> f64 {
        let m = &self.mixtures[i];
        let t = &self.targets_std[i];
        -m.iter().zip(t).map(|(mix, &y)| mix.log_prob(y)).sum::<f64>() / t.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NllSummary {
    pub mean: f64,
    pub std_error: f64,
    pub per_step: Vec<f64>,
}

/// Standardised NLL: per-sample step means, then mean and standard error.
pub fn evaluate_nll(f: &Forecasts) -> NllSummary {
    let n = f.samples();
    let per_sample: Vec<f64> = (0..n).map(|i| f.sample_nll(i)).collect();
    let mean = per_sample.iter().sum::<f64>() / n as f64;
    let std_error = if n > 1 {
        let var = per_sample.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    let steps = f.horizon();
    let mut per_step = vec![0.0; steps];
    let mut counts = vec![0usize; steps];
    for (m, t) in f.mixtures.iter().zip(&f.targets_std) {
        for (l, (mix, &y)) in m.iter().zip(t).enumerate() {
            per_step[l] -= mix.log_prob(y);
            counts[l] += 1;
        }
    }
    for (v, c) in per_step.iter_mut().zip(counts) {
        *v /= c as f64;
    }
    NllSummary {
        mean,
        std_error,
        per_step,
    }
}

/// Mean absolute error of the mixture mean, in milliseconds.
pub fn evaluate_mae(f: &Forecasts) -> f64 {
    let t = f.transform;
    let (sum, n) = f
        .pairs()
        .fold((0.0, 0usize), |(s, n), (mix, y)| (s + (t.to_ms(mix.mean()) - t.to_ms(y)).abs(), n + 1));
    sum / n as f64
}

/// Whether `y` lies in the central `level` interval `[q_{(1−level)/2},
/// q_{(1+level)/2}]`, tested through the CDF so nested levels nest exactly.
pub fn in_central_interval(mix: &MixtureParams, y: f64, level: f64) -> bool {
    let u = mix.cdf(y);
    let tail = 0.5 * (1.0 - level);
    u >= tail && u <= 1.0 - tail
}

pub fn empirical_coverage(f: &Forecasts, level: f64) -> Result<f64> {
    coverage_curve(f, &[level]).map(|c| c.coverage[0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageCurve {
    pub levels: Vec<f64>,
    pub coverage: Vec<f64>,
}

impl CoverageCurve {
    pub fn is_monotone(&self) -> bool {
        let mut idx: Vec<usize> = (0..self.levels.len()).collect();
        idx.sort_by(|&a, &b| self.levels[a].total_cmp(&self.levels[b]));
        idx.windows(2).all(|w| self.coverage[w[0]] <= self.coverage[w[1]])
    }
}

pub fn coverage_curve(f: &Forecasts, levels: &[f64]) -> Result<CoverageCurve> {
    if let Some(l) = levels.iter().find(|l| !(**l > 0.0 && **l < 1.0)) {
        return Err(Error::Argument(format!("coverage level {l} outside (0, 1)")));
    }
    let mut hits = vec![0usize; levels.len()];
    let mut n = 0usize;
    for (mix, y) in f.pairs() {
        let u = mix.cdf(y);
        for (h, &level) in hits.iter_mut().zip(levels) {
            let tail = 0.5 * (1.0 - level);
            if u >= tail && u <= 1.0 - tail {
                *h += 1;
            }
        }
        n += 1;
    }
    Ok(CoverageCurve {
        levels: levels.to_vec(),
        coverage: hits.into_iter().map(|h| h as f64 / n as f64).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupNll {
    pub inter_arrival_ms: f64,
    pub samples: usize,
    pub nll: f64,
}

/// NLL per distinct inter-arrival time of the newest history record.
pub fn decompose_by_group(f: &Forecasts) -> Vec<GroupNll> {
    let mut groups: BTreeMap<u64, (f64, usize, f64)> = BTreeMap::new();
    for (i, &key) in f.groups.iter().enumerate() {
        let e = groups.entry(key.to_bits()).or_insert((key, 0, 0.0));
        e.1 += 1;
        e.2 += f.sample_nll(i);
    }
    let mut out: Vec<GroupNll> = groups
        .into_values()
        .map(|(key, n, total)| GroupNll {
            inter_arrival_ms: key,
            samples: n,
            nll: total / n as f64,
        })
        .collect();
    out.sort_by(|a, b| a.inter_arrival_ms.total_cmp(&b.inter_arrival_ms));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FanStep {
    pub step: usize,
    pub mean_ms: f64,
    /// `(level, lower_ms, upper_ms)` for the 50/70/90/99 % central intervals.
    pub bands: Vec<(f64, f64, f64)>,
    pub truth_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FanChart {
    pub history_ms: Vec<f64>,
    pub steps: Vec<FanStep>,
    pub mixtures: Vec<Vec<ComponentMs>>,
}

/// Per-step interval bands of one window, in milliseconds.
pub fn fan_chart(model: &Model, sample: &WindowSample<'_>, norm: &NormStats) -> Result<FanChart> {
    let mixtures = model.predict(sample.history, norm)?;
    let t = norm.delay_transform();
    fan_chart_from(&mixtures, sample, &t)
}

pub fn fan_chart_from(
    mixtures: &[MixtureParams],
    sample: &WindowSample<'_>,
    t: &AffineTransform,
) -> Result<FanChart> {
    let mut steps = Vec::with_capacity(mixtures.len());
    for (l, (mix, truth)) in mixtures.iter().zip(sample.future_delays_ms()).enumerate() {
        let mut bands = Vec::with_capacity(FAN_LEVELS.len());
        for level in FAN_LEVELS {
            let (lo, hi) = mix.central_interval(level)?;
            bands.push((level, t.to_ms(lo), t.to_ms(hi)));
        }
        steps.push(FanStep {
            step: l,
            mean_ms: t.to_ms(mix.mean()),
            bands,
            truth_ms: truth,
        });
    }
    Ok(FanChart {
        history_ms: sample.history[..sample.history.len() - 1]
            .iter()
            .map(|r| r.delay_ms)
            .collect(),
        steps,
        mixtures: mixtures.iter().map(|m| components_ms(m, t)).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub per_sample_train_seconds: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub decode_mode: String,
    pub history_len: usize,
    pub horizon_len: usize,
    pub token_dim: usize,
    pub param_count: usize,
    pub train_samples: usize,
    pub samples: usize,
    pub nll_definition: String,
    pub nll_mean: f64,
    pub nll_std_error: f64,
    pub point_estimate: String,
    pub mae_ms: f64,
    pub coverage: Vec<(f64, f64)>,
    pub calibration: CoverageCurve,
    pub per_step_nll: Vec<f64>,
    pub groups: Vec<GroupNll>,
    pub fan_chart: Option<FanChart>,
    /// Wall-clock figures; kept out of the CSV so it stays reproducible.
    pub timing: Option<Timing>,
}

impl EvalReport {
    /// Computes every metric of `f`.
    pub fn build(model: &Model, f: &Forecasts) -> Result<Self> {
        let nll = evaluate_nll(f);
        let cov = coverage_curve(f, &COVERAGE_LEVELS)?;
        let cfg = model.config();
        Ok(EvalReport {
            model: cfg.kind.to_string(),
            decode_mode: cfg.decode_mode.to_string(),
            history_len: cfg.history_len,
            horizon_len: cfg.horizon_len,
            token_dim: cfg.token_dim,
            param_count: model.param_count(),
            train_samples: 0,
            samples: f.samples(),
            nll_definition: NLL_DEFINITION.into(),
            nll_mean: nll.mean,
            nll_std_error: nll.std_error,
            point_estimate: POINT_ESTIMATE.into(),
            mae_ms: evaluate_mae(f),
            coverage: cov.levels.iter().copied().zip(cov.coverage.iter().copied()).collect(),
            calibration: coverage_curve(f, &default_curve_grid())?,
            per_step_nll: nll.per_step,
            groups: decompose_by_group(f),
            fan_chart: None,
            timing: None,
        })
    }

    /// Flat `metric,key,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,key,value\n");
        let mut row = |metric: &str, key: &str, value: String| {
            out.push_str(&format!("{metric},{key},{value}\n"));
        };
        row("model", "", self.model.clone());
        row("decode_mode", "", self.decode_mode.clone());
        row("history_len", "", self.history_len.to_string());
        row("horizon_len", "", self.horizon_len.to_string());
        row("token_dim", "", self.token_dim.to_string());
        row("param_count", "", self.param_count.to_string());
        row("train_samples", "", self.train_samples.to_string());
        row("samples", "", self.samples.to_string());
        row("nll_mean", "", format!("{}", self.nll_mean));
        row("nll_std_error", "", format!("{}", self.nll_std_error));
        row("mae_ms", "", format!("{}", self.mae_ms));
        for (level, c) in &self.coverage {
            row("coverage", &format!("{level}"), format!("{c}"));
        }
        for (level, c) in self.calibration.levels.iter().zip(&self.calibration.coverage) {
            row("calibration", &format!("{level}"), format!("{c}"));
        }
        for (l, v) in self.per_step_nll.iter().enumerate() {
            row("step_nll", &l.to_string(), format!("{v}"));
        }
        for g in &self.groups {
            row("group_nll", &format!("{}", g.inter_arrival_ms), format!("{}", g.nll));
            row("group_samples", &format!("{}", g.inter_arrival_ms), g.samples.to_string());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn forecasts(targets: Vec<Vec<f64>>) -> Forecasts {
        let mixtures = targets
            .iter()
            .map(|t| vec![MixtureParams::standard_normal(); t.len()])
            .collect();
        let groups = vec![20.0; targets.len()];
        Forecasts::new(mixtures, targets, groups, AffineTransform::IDENTITY).unwrap()
    }

    #[test]
    fn median_truth_is_always_covered() {
        let f = forecasts(vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
        for level in [0.01, 0.5, 0.99] {
            assert_eq!(empirical_coverage(&f, level).unwrap(), 1.0);
        }
    }

    #[test]
    fn duplicating_split_keeps_mean() {
        let a = forecasts(vec![vec![0.3, -1.0], vec![2.0, 0.1]]);
        let b = forecasts(vec![vec![0.3, -1.0], vec![2.0, 0.1], vec![0.3, -1.0], vec![2.0, 0.1]]);
        assert!((evaluate_nll(&a).mean - evaluate_nll(&b).mean).abs() < 1e-15);
    }

    #[test]
    fn single_group_matches_overall() {
        let f = forecasts(vec![vec![0.3, -1.0], vec![2.0, 0.1]]);
        let g = decompose_by_group(&f);
        assert_eq!(g.len(), 1);
        assert!((g[0].nll - evaluate_nll(&f).mean).abs() < 1e-12);
    }

    #[test]
    fn curve_grid_shape() {
        let g = default_curve_grid();
        assert_eq!(g.len(), 20);
        assert!((g[0] - 0.05).abs() < 1e-15 && g[19] == 0.99);
    }

    #[test]
    fn level_outside_unit_interval() {
        let f = forecasts(vec![vec![0.0]]);
        assert!(empirical_coverage(&f, 1.0).is_err());
    }
}
