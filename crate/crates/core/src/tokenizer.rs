//! Packet-context tokenizer.
//!
//! Continuous features (delay, size, inter-arrival) are standardised and
//! projected to `S` dimensions; discrete features (slot, MCS, HARQ and RLC
//! retransmission counts) are looked up in embedding tables whose row 0 is the
//! padding row. The seven `S`-vectors are concatenated and fused by a small
//! expand/compress/project network into one token.

use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::NormStats;
use crate::diff::{glorot, uniform, Array, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::sim::{PacketRecord, MAX_MCS};

pub const MCS_ROWS: usize = 30;
pub const HARQ_ROWS: usize = 6;
pub const RLC_ROWS: usize = 9;
/// Concatenated per-feature embeddings entering the fusion network.
pub const FUSED_FEATURES: usize = 7;
pub const FUSION_EXPAND: usize = 8;
pub const FUSION_COMPRESS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    pub token_dim: usize,
    pub slots_per_frame: u32,
    pub dropout: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            token_dim: 16,
            slots_per_frame: 10,
            dropout: 0.2,
        }
    }
}

impl TokenizerConfig {
    pub fn slot_rows(&self) -> usize {
        self.slots_per_frame as usize + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.token_dim == 0 {
            return Err(Error::Config("token_dim must be positive".into()));
        }
        if self.slots_per_frame == 0 {
            return Err(Error::Config("slots_per_frame must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Model-ready form of one record.
///
/// `delay_std == None` marks the delay as not yet observed; the tokenizer then
/// uses its learned pending vector in place of the delay projection.
#[derive(Clone, Debug, PartialEq)]
pub struct PacketFeatures {
    pub delay_std: Option<f64>,
    pub size_std: f64,
    pub inter_arrival_std: f64,
    pub slot_id: usize,
    pub mcs_id: usize,
    pub harq_id: usize,
    pub rlc_id: usize,
}

static CLAMP_WARNED: AtomicBool = AtomicBool::new(false);

fn category_id(feature: &'static str, value: Option<u32>, rows: usize) -> Result<usize> {
    match value {
        None => Ok(0),
        Some(v) if (v as usize) + 1 < rows => Ok(v as usize + 1),
        Some(v) => Err(Error::Category { feature, value: v, rows }),
    }
}

fn count_id(feature: &'static str, value: Option<u32>, rows: usize) -> usize {
    match value {
        None => 0,
        Some(v) if (v as usize) + 1 < rows => v as usize + 1,
        Some(v) => {
            if !CLAMP_WARNED.swap(true, Ordering::Relaxed) {
                log::warn!("{feature} count {v} exceeds the embedding table; clamping to {}", rows - 2);
            }
            rows - 1
        }
    }
}

impl PacketFeatures {
    /// Every field of `record` is known.
    pub fn observed(record: &PacketRecord, norm: &NormStats, cfg: &TokenizerConfig) -> Result<Self> {
        if let Some(m) = record.mcs {
            if m > MAX_MCS {
                return Err(Error::Category {
                    feature: "mcs",
                    value: m,
                    rows: MCS_ROWS,
                });
            }
        }
        Ok(PacketFeatures {
            delay_std: Some(norm.delay.standardize(record.delay_ms)),
            size_std: norm.size.standardize(record.size_bytes as f64),
            inter_arrival_std: norm.inter_arrival.standardize(record.inter_arrival_ms),
            slot_id: category_id("slot", record.slot, cfg.slot_rows())?,
            mcs_id: category_id("mcs", record.mcs, MCS_ROWS)?,
            harq_id: count_id("harq_retx", record.harq_retx, HARQ_ROWS),
            rlc_id: count_id("rlc_retx", record.rlc_retx, RLC_ROWS),
        })
    }

    /// The record's outcome (delay and retransmissions) is still unknown.
    pub fn pending(record: &PacketRecord, norm: &NormStats, cfg: &TokenizerConfig) -> Result<Self> {
        Ok(PacketFeatures {
            delay_std: None,
            harq_id: 0,
            rlc_id: 0,
            ..Self::observed(record, norm, cfg)?
        })
    }
}

/// Features of a history window: every record observed except the newest,
/// whose delay is the first forecast target.
pub fn window_features(
    history: &[PacketRecord],
    norm: &NormStats,
    cfg: &TokenizerConfig,
) -> Result<Vec<PacketFeatures>> {
    let n = history.len();
    history
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if i + 1 == n {
                PacketFeatures::pending(r, norm, cfg)
            } else {
                PacketFeatures::observed(r, norm, cfg)
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
struct Projection {
    w: ParamId,
    b: ParamId,
}

/// Parameter handles of a registered tokenizer.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    cfg: TokenizerConfig,
    delay: Projection,
    size: Projection,
    inter_arrival: Projection,
    pending: ParamId,
    slot: ParamId,
    mcs: ParamId,
    harq: ParamId,
    rlc: ParamId,
    fusion: [Projection; 3],
}

fn projection<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<Projection> {
    Ok(Projection {
        w: store.insert(format!("{name}.w"), glorot(rng, fan_in, fan_out))?,
        b: store.insert(format!("{name}.b"), Array::zeros(1, fan_out))?,
    })
}

impl Tokenizer {
    /// Registers tokenizer parameters under the `tok.` prefix.
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: TokenizerConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.token_dim;
        let table = |store: &mut ParamStore, rng: &mut R, name: &str, rows: usize| {
            store.insert(format!("tok.{name}"), uniform(rng, rows, s, 0.5))
        };
        let delay = projection(store, rng, "tok.delay", 1, s)?;
        let size = projection(store, rng, "tok.size", 1, s)?;
        let inter_arrival = projection(store, rng, "tok.inter_arrival", 1, s)?;
        let pending = store.insert("tok.delay_pending", uniform(rng, 1, s, 0.5))?;
        let slot = table(store, rng, "slot", cfg.slot_rows())?;
        let mcs = table(store, rng, "mcs", MCS_ROWS)?;
        let harq = table(store, rng, "harq", HARQ_ROWS)?;
        let rlc = table(store, rng, "rlc", RLC_ROWS)?;
        let (wide, mid) = (FUSION_EXPAND * s, FUSION_COMPRESS * s);
        let fusion = [
            projection(store, rng, "tok.fuse0", FUSED_FEATURES * s, wide)?,
            projection(store, rng, "tok.fuse1", wide, mid)?,
            projection(store, rng, "tok.fuse2", mid, s)?,
        ];
        Ok(Tokenizer {
            cfg,
            delay,
            size,
            inter_arrival,
            pending,
            slot,
            mcs,
            harq,
            rlc,
            fusion,
        })
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.cfg
    }

    pub fn token_dim(&self) -> usize {
        self.cfg.token_dim
    }

    /// Embeds a batch of records into an `n × S` token matrix, one row each.
    pub fn embed(&self, g: &mut Graph, features: &[PacketFeatures]) -> Result<Var> {
        let n = features.len();
        if n == 0 {
            return Err(Error::shape("tokenizer", "no records to embed"));
        }
        let s = self.cfg.token_dim;
        let col = |f: &dyn Fn(&PacketFeatures) -> f64| Array::column_vector(features.iter().map(f).collect());

        let delay_in = g.constant(col(&|f| f.delay_std.unwrap_or(0.0)));
        let mut delay = g.linear(delay_in, self.delay.w, self.delay.b)?;
        if features.iter().any(|f| f.delay_std.is_none()) {
            let mut keep = Array::zeros(n, s);
            let mut missing = Array::zeros(n, 1);
            for (i, f) in features.iter().enumerate() {
                if f.delay_std.is_some() {
                    keep.row_mut(i).fill(1.0);
                } else {
                    missing.set(i, 0, 1.0);
                }
            }
            let keep = g.constant(keep);
            let missing = g.constant(missing);
            let pending = g.param(self.pending);
            let observed = g.mul(delay, keep)?;
            let filled = g.matmul(missing, pending)?;
            delay = g.add(observed, filled)?;
        }
        let size_in = g.constant(col(&|f| f.size_std));
        let size = g.linear(size_in, self.size.w, self.size.b)?;
        let ia_in = g.constant(col(&|f| f.inter_arrival_std));
        let ia = g.linear(ia_in, self.inter_arrival.w, self.inter_arrival.b)?;

        let mut lookup = |table: ParamId, id: fn(&PacketFeatures) -> usize| -> Result<Var> {
            let t = g.param(table);
            g.gather_rows(t, features.iter().map(id).collect())
        };
        let slot = lookup(self.slot, |f| f.slot_id)?;
        let mcs = lookup(self.mcs, |f| f.mcs_id)?;
        let harq = lookup(self.harq, |f| f.harq_id)?;
        let rlc = lookup(self.rlc, |f| f.rlc_id)?;

        let x = g.concat_cols(&[delay, size, ia, slot, mcs, harq, rlc])?;
        let [f0, f1, f2] = self.fusion;
        let x = g.linear(x, f0.w, f0.b)?;
        let x = g.relu(x);
        let x = g.dropout(x, self.cfg.dropout);
        let x = g.linear(x, f1.w, f1.b)?;
        let x = g.relu(x);
        let x = g.dropout(x, self.cfg.dropout);
        g.linear(x, f2.w, f2.b)
    }

    /// Token of a single record, `1 × S`.
    pub fn embed_packet(&self, g: &mut Graph, features: &PacketFeatures) -> Result<Var> {
        self.embed(g, std::slice::from_ref(features))
    }

    /// Token matrix `U` (`H × S`) of a history window in chronological order.
    pub fn embed_window(
        &self,
        g: &mut Graph,
        history: &[PacketRecord],
        norm: &NormStats,
        history_len: usize,
    ) -> Result<Var> {
        if history.len() != history_len {
            return Err(Error::shape(
                "embed_window",
                format!("history has {} records, expected H = {history_len}", history.len()),
            ));
        }
        let features = window_features(history, norm, &self.cfg)?;
        self.embed(g, &features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(seq: u64) -> PacketRecord {
        PacketRecord {
            seq,
            arrival_time_ms: seq as f64 * 20.0,
            size_bytes: 100,
            inter_arrival_ms: 20.0,
            slot: Some((seq % 10) as u32),
            mcs: Some(20),
            harq_retx: Some(0),
            rlc_retx: Some(0),
            delay_ms: 4.0 + seq as f64,
        }
    }

    fn setup(s: usize) -> (ParamStore, Tokenizer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = TokenizerConfig {
            token_dim: s,
            ..TokenizerConfig::default()
        };
        let tok = Tokenizer::new(&mut store, cfg, &mut rng).unwrap();
        (store, tok)
    }

    #[test]
    fn window_shape() {
        let (store, tok) = setup(16);
        let hist: Vec<_> = (0..10).map(record).collect();
        let mut g = Graph::inference(&store);
        let u = tok.embed_window(&mut g, &hist, &NormStats::identity(), 10).unwrap();
        assert_eq!(g.shape(u), (10, 16));
        assert!(tok.embed_window(&mut g, &hist, &NormStats::identity(), 9).is_err());
    }

    #[test]
    fn missing_equals_padding() {
        let norm = NormStats::identity();
        let cfg = TokenizerConfig::default();
        let mut r = record(1);
        r.mcs = None;
        let a = PacketFeatures::observed(&r, &norm, &cfg).unwrap();
        assert_eq!(a.mcs_id, 0);
    }

    #[test]
    fn out_of_range_category_names_feature() {
        let norm = NormStats::identity();
        let cfg = TokenizerConfig::default();
        let mut r = record(1);
        r.slot = Some(10);
        match PacketFeatures::observed(&r, &norm, &cfg) {
            Err(Error::Category { feature, value, .. }) => assert_eq!((feature, value), ("slot", 10)),
            other => panic!("{other:?}"),
        }
        r.slot = Some(3);
        r.mcs = Some(29);
        assert!(matches!(
            PacketFeatures::observed(&r, &norm, &cfg),
            Err(Error::Category { feature: "mcs", .. })
        ));
    }

    #[test]
    fn large_counts_clamp() {
        let norm = NormStats::identity();
        let cfg = TokenizerConfig::default();
        let mut r = record(1);
        r.harq_retx = Some(12);
        r.rlc_retx = Some(3);
        let f = PacketFeatures::observed(&r, &norm, &cfg).unwrap();
        assert_eq!((f.harq_id, f.rlc_id), (HARQ_ROWS - 1, 4));
    }

    #[test]
    fn newest_record_is_pending() {
        let hist: Vec<_> = (0..3).map(record).collect();
        let f = window_features(&hist, &NormStats::identity(), &TokenizerConfig::default()).unwrap();
        assert!(f[..2].iter().all(|x| x.delay_std.is_some()));
        assert_eq!((f[2].delay_std, f[2].harq_id, f[2].rlc_id), (None, 0, 0));
    }
}
