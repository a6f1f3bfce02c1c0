//! Windowed supervised samples, normalisation statistics and splits.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mdn::AffineTransform;
use crate::sim::{ingest_records, PacketRecord};

/// Number of context features per packet (three continuous, four discrete).
pub const FEATURE_COUNT: usize = 7;

pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub history_len: usize,
    pub horizon_len: usize,
}

impl WindowConfig {
    pub fn new(history_len: usize, horizon_len: usize) -> Result<Self> {
        let cfg = WindowConfig {
            history_len,
            horizon_len,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.history_len == 0 || self.horizon_len == 0 {
            return Err(Error::Config(format!(
                "history and horizon must be ≥ 1, got H={} L={}",
                self.history_len, self.horizon_len
            )));
        }
        Ok(())
    }

    /// Records needed for one window: `H + L − 1`.
    pub fn span(&self) -> usize {
        self.history_len + self.horizon_len - 1
    }
}

/// One supervised example: `H` history records ending at packet `m` and the
/// `L` records whose delays are predicted, starting at `m`.
///
/// The newest history record and the first target are the same packet; its
/// delay and retransmission counts are not yet observed when the forecast is
/// made, so the tokenizer treats them as pending.
#[derive(Clone, Copy, Debug)]
pub struct WindowSample<'a> {
    pub history: &'a [PacketRecord],
    pub future: &'a [PacketRecord],
}

impl<'a> WindowSample<'a> {
    pub fn future_delays_ms(&self) -> impl Iterator<Item = f64> + 'a {
        self.future.iter().map(|r| r.delay_ms)
    }

    /// Index of the newest history record within its trace.
    pub fn end_seq(&self) -> u64 {
        self.history.last().map_or(0, |r| r.seq)
    }

    pub fn last(&self) -> &'a PacketRecord {
        self.history.last().expect("nonempty history")
    }
}

fn check_contiguous(records: &[PacketRecord]) -> Result<()> {
    for w in records.windows(2) {
        if w[1].seq != w[0].seq + 1 {
            return Err(Error::Validation(format!(
                "records not contiguous: seq {} followed by {}",
                w[0].seq, w[1].seq
            )));
        }
    }
    Ok(())
}

/// All stride-1 windows of a contiguous trace.
pub fn build_windows<'a>(records: &'a [PacketRecord], cfg: &WindowConfig) -> Result<Vec<WindowSample<'a>>> {
    cfg.validate()?;
    check_contiguous(records)?;
    if records.len() < cfg.span() {
        return Err(Error::InsufficientData(format!(
            "{} records, need at least H + L − 1 = {}",
            records.len(),
            cfg.span()
        )));
    }
    Ok((cfg.history_len - 1..=records.len() - cfg.horizon_len)
        .map(|m| window_at(records, cfg, m))
        .collect())
}

fn window_at<'a>(records: &'a [PacketRecord], cfg: &WindowConfig, m: usize) -> WindowSample<'a> {
    WindowSample {
        history: &records[m + 1 - cfg.history_len..=m],
        future: &records[m..m + cfg.horizon_len],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: f64,
    pub std: f64,
}

impl FeatureStats {
    fn fit(values: impl Iterator<Item = f64>) -> Self {
        let (mut n, mut sum, mut sq) = (0.0, 0.0, 0.0);
        let vals: Vec<f64> = values.collect();
        for &v in &vals {
            n += 1.0;
            sum += v;
        }
        let mean = sum / n;
        for &v in &vals {
            sq += (v - mean) * (v - mean);
        }
        FeatureStats {
            mean,
            std: (sq / n).sqrt().max(STD_FLOOR),
        }
    }

    #[inline]
    pub fn standardize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }
}

/// Standardisation of the continuous features, fitted on training histories.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub delay: FeatureStats,
    pub size: FeatureStats,
    pub inter_arrival: FeatureStats,
}

impl NormStats {
    /// Map between standardised delay and milliseconds.
    pub fn delay_transform(&self) -> AffineTransform {
        AffineTransform {
            location: self.delay.mean,
            scale: self.delay.std,
        }
    }

    pub fn identity() -> Self {
        let unit = FeatureStats {
            mean: 0.0,
            std: 1.0,
        };
        NormStats {
            delay: unit,
            size: unit,
            inter_arrival: unit,
        }
    }
}

/// Population mean and standard deviation (floored at 1e-6) of each
/// continuous feature over all history records of `train`.
pub fn fit_norm_stats(train: &[WindowSample<'_>]) -> Result<NormStats> {
    if train.is_empty() {
        return Err(Error::InsufficientData(
            "cannot fit normalisation on an empty training split".into(),
        ));
    }
    let records = || train.iter().flat_map(|s| s.history.iter());
    Ok(NormStats {
        delay: FeatureStats::fit(records().map(|r| r.delay_ms)),
        size: FeatureStats::fit(records().map(|r| r.size_bytes as f64)),
        inter_arrival: FeatureStats::fit(records().map(|r| r.inter_arrival_ms)),
    })
}

/// Locates a window: trace index and position of its newest history record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleRef {
    pub trace: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// Fraction of each trace (taken from its tail) reserved for testing.
    pub test_fraction: f64,
    /// Fraction of the training pool used for validation.
    pub val_fraction: f64,
    /// Cap on the training pool (train + validation) window count.
    pub pool_size: Option<usize>,
    /// Cap on the test window count.
    pub test_size: Option<usize>,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            test_fraction: 0.2,
            val_fraction: 0.2,
            pool_size: None,
            test_size: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMeta {
    /// Windows across all partitions.
    pub n_samples: usize,
    /// Context features per packet.
    pub n_features: usize,
    pub sources: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<SampleRef>,
    pub val: Vec<SampleRef>,
    pub test: Vec<SampleRef>,
    pub meta: SplitMeta,
}

/// Partitions the windows of traces with the given record counts.
///
/// The tail `test_fraction` of every trace is held out; windows touching the
/// held-out region are never placed in the pool, and test windows lie wholly
/// inside it. The pool is shuffled with `seed` and divided train:val.
pub fn split_dataset(
    trace_lens: &[usize],
    window: &WindowConfig,
    cfg: &SplitConfig,
    sources: Vec<String>,
) -> Result<DatasetSplit> {
    window.validate()?;
    if !(0.0..1.0).contains(&cfg.test_fraction) || !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::Config("split fractions must lie in [0, 1)".into()));
    }
    let (h, l) = (window.history_len, window.horizon_len);
    let mut pool = Vec::new();
    let mut test = Vec::new();
    for (t, &n) in trace_lens.iter().enumerate() {
        if n < window.span() {
            continue;
        }
        let held = (n as f64 * cfg.test_fraction).ceil() as usize;
        let cut = n - held.min(n);
        for m in h - 1..=n - l {
            let first = m + 1 - h;
            let last = m + l - 1;
            if last < cut {
                pool.push(SampleRef { trace: t, end: m });
            } else if first >= cut {
                test.push(SampleRef { trace: t, end: m });
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    pool.shuffle(&mut rng);
    if let Some(cap) = cfg.pool_size {
        if pool.len() < cap {
            return Err(Error::InsufficientData(format!(
                "requested {cap} pool windows, only {} available",
                pool.len()
            )));
        }
        pool.truncate(cap);
    }
    if let Some(cap) = cfg.test_size {
        if test.len() > cap {
            test.shuffle(&mut rng);
            test.truncate(cap);
            test.sort();
        }
    }
    let n_val = (pool.len() as f64 * cfg.val_fraction).round() as usize;
    if pool.len() < 2 || n_val == 0 || n_val == pool.len() {
        return Err(Error::InsufficientData(format!(
            "{} pool windows cannot form nonempty train and validation splits",
            pool.len()
        )));
    }
    if cfg.test_fraction > 0.0 && test.is_empty() {
        return Err(Error::InsufficientData(
            "held-out region too short for a single test window".into(),
        ));
    }
    let val = pool.split_off(pool.len() - n_val);
    Ok(DatasetSplit {
        meta: SplitMeta {
            n_samples: pool.len() + val.len() + test.len(),
            n_features: FEATURE_COUNT,
            sources,
        },
        train: pool,
        val,
        test,
    })
}

pub const DATASET_FORMAT: &str = "owdf-dataset/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceTrace {
    /// File name relative to the manifest directory.
    pub file: String,
    pub sha256: String,
    pub records: usize,
}

/// On-disk description of a prepared dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub window: WindowConfig,
    pub norm: NormStats,
    pub split: DatasetSplit,
    pub sources: Vec<SourceTrace>,
}

/// Traces plus a manifest; windows are materialised on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub traces: Vec<Vec<PacketRecord>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Dataset {
    /// Builds windows and splits for in-memory traces and fits normalisation
    /// on the training partition.
    pub fn prepare(
        traces: Vec<Vec<PacketRecord>>,
        window: WindowConfig,
        split: &SplitConfig,
        names: Vec<String>,
    ) -> Result<Self> {
        for t in &traces {
            check_contiguous(t)?;
        }
        let lens: Vec<usize> = traces.iter().map(Vec::len).collect();
        let parts = split_dataset(&lens, &window, split, names.clone())?;
        let sources = traces
            .iter()
            .zip(&names)
            .map(|(t, name)| {
                Ok(SourceTrace {
                    file: name.clone(),
                    sha256: hash_records(t)?,
                    records: t.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut ds = Dataset {
            manifest: Manifest {
                format: DATASET_FORMAT.into(),
                window,
                norm: NormStats::identity(),
                split: parts,
                sources,
            },
            traces,
        };
        let train = ds.samples(Partition::Train);
        ds.manifest.norm = fit_norm_stats(&train)?;
        Ok(ds)
    }

    pub fn window(&self) -> WindowConfig {
        self.manifest.window
    }

    pub fn norm(&self) -> &NormStats {
        &self.manifest.norm
    }

    pub fn refs(&self, part: Partition) -> &[SampleRef] {
        let s = &self.manifest.split;
        match part {
            Partition::Train => &s.train,
            Partition::Val => &s.val,
            Partition::Test => &s.test,
        }
    }

    pub fn sample(&self, r: SampleRef) -> WindowSample<'_> {
        window_at(&self.traces[r.trace], &self.manifest.window, r.end)
    }

    pub fn samples(&self, part: Partition) -> Vec<WindowSample<'_>> {
        self.refs(part).iter().map(|&r| self.sample(r)).collect()
    }

    /// Writes `manifest.json` and the traces into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (t, src) in self.traces.iter().zip(&self.manifest.sources) {
            crate::sim::write_records(&dir.join(&src.file), t)?;
        }
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Loads a prepared dataset, verifying trace hashes.
    pub fn load(dir: &Path) -> Result<Self> {
        let path: PathBuf = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != DATASET_FORMAT {
            return Err(Error::Validation(format!(
                "unsupported dataset format `{}`",
                manifest.format
            )));
        }
        let mut traces = Vec::new();
        for src in &manifest.sources {
            let recs = ingest_records(&dir.join(&src.file))?;
            let hash = hash_records(&recs)?;
            if hash != src.sha256 {
                return Err(Error::Validation(format!(
                    "trace {} does not match manifest hash",
                    src.file
                )));
            }
            traces.push(recs);
        }
        Ok(Dataset { manifest, traces })
    }
}

/// SHA-256 of the canonical JSON-lines serialisation.
pub fn hash_records(records: &[PacketRecord]) -> Result<String> {
    let text = crate::sim::records_to_jsonl(records)?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}
