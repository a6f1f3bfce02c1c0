//! Sequence backbones mapping a token matrix to raw mixture parameters.

mod attention;
mod lstm;
mod mlp;
mod transformer;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::NormStats;
use crate::diff::{glorot, Array, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::mdn::{decode_rows, MixtureParams};
use crate::sim::PacketRecord;
use crate::tokenizer::{PacketFeatures, Tokenizer, TokenizerConfig};

pub use attention::{multi_head_attention, AttentionWeights};
pub use lstm::{Lstm, LstmLayer, LstmState};
pub use mlp::Mlp;
pub use transformer::{positional_encoding, DecoderLayer, EncoderLayer, Transformer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Mlp,
    LstmSs,
    Lstm,
    Transformer,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Mlp, ModelKind::LstmSs, ModelKind::Lstm, ModelKind::Transformer];

    /// Single-step models emit one θ shared by every future step.
    pub fn is_single_step(self) -> bool {
        matches!(self, ModelKind::Mlp | ModelKind::LstmSs)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Mlp => "mlp",
            ModelKind::LstmSs => "lstm-ss",
            ModelKind::Lstm => "lstm",
            ModelKind::Transformer => "transformer",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown model kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    #[default]
    Parallel,
    Autoregressive,
}

impl DecodeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DecodeMode::Parallel => "parallel",
            DecodeMode::Autoregressive => "autoregressive",
        }
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(DecodeMode::Parallel),
            "autoregressive" | "ar" => Ok(DecodeMode::Autoregressive),
            _ => Err(Error::Argument(format!("unknown decode mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub token_dim: usize,
    pub mixture_components: usize,
    pub history_len: usize,
    pub horizon_len: usize,
    pub n_rec: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    pub n_heads: usize,
    /// Transformer feed-forward width as a multiple of `token_dim`.
    pub ffn_expansion: usize,
    /// MLP hidden width as a multiple of `token_dim`.
    pub mlp_expansion: usize,
    pub dropout: f64,
    pub decode_mode: DecodeMode,
    pub slots_per_frame: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Transformer,
            token_dim: 16,
            mixture_components: 8,
            history_len: 50,
            horizon_len: 50,
            n_rec: 2,
            n_enc: 6,
            n_dec: 6,
            n_heads: 4,
            ffn_expansion: 5,
            mlp_expansion: 4,
            dropout: 0.2,
            decode_mode: DecodeMode::Parallel,
            slots_per_frame: 10,
        }
    }
}

impl ModelConfig {
    pub fn new(kind: ModelKind) -> Self {
        ModelConfig {
            kind,
            ..Self::default()
        }
    }

    /// Raw parameters per step, `V = 3K`.
    pub fn raw_dim(&self) -> usize {
        3 * self.mixture_components
    }

    pub fn tokenizer(&self) -> TokenizerConfig {
        TokenizerConfig {
            token_dim: self.token_dim,
            slots_per_frame: self.slots_per_frame,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer().validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if self.mixture_components == 0 {
            return fail("mixture_components must be at least 1".into());
        }
        if self.history_len == 0 || self.horizon_len == 0 {
            return fail("history_len and horizon_len must be at least 1".into());
        }
        match self.kind {
            ModelKind::Transformer => {
                if self.n_heads == 0 || self.token_dim % self.n_heads != 0 {
                    return fail(format!(
                        "token_dim {} is not divisible by n_heads {}",
                        self.token_dim, self.n_heads
                    ));
                }
                if self.ffn_expansion == 0 {
                    return fail("ffn_expansion must be positive".into());
                }
            }
            ModelKind::Lstm | ModelKind::LstmSs if self.n_rec == 0 => {
                return fail("n_rec must be at least 1".into());
            }
            ModelKind::Mlp if self.mlp_expansion == 0 => {
                return fail("mlp_expansion must be positive".into());
            }
            _ => {}
        }
        Ok(())
    }
}

/// Affine layer handles.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub(crate) fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        Ok(Dense {
            w: store.insert(format!("{name}.w"), glorot(rng, fan_in, fan_out))?,
            b: store.insert(format!("{name}.b"), Array::zeros(1, fan_out))?,
        })
    }

    /// Glorot weights multiplied by `gain`.
    pub(crate) fn scaled<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
    ) -> Result<Self> {
        let mut w = glorot(rng, fan_in, fan_out);
        w.scale_assign(gain);
        Ok(Dense {
            w: store.insert(format!("{name}.w"), w)?,
            b: store.insert(format!("{name}.b"), Array::zeros(1, fan_out))?,
        })
    }

    /// Output layer producing raw mixture parameters; component means start
    /// spread over `[-1.5, 1.5]` so the components are not interchangeable.
    pub(crate) fn mixture_head<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        k: usize,
    ) -> Result<Self> {
        let mut bias = Array::zeros(1, 3 * k);
        for j in 0..k {
            let mu = if k == 1 { 0.0 } else { -1.5 + 3.0 * j as f64 / (k - 1) as f64 };
            bias.set(0, k + j, mu);
        }
        let mut w = glorot(rng, fan_in, 3 * k);
        w.scale_assign(0.1);
        Ok(Dense {
            w: store.insert(format!("{name}.w"), w)?,
            b: store.insert(format!("{name}.b"), bias)?,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.linear(x, self.w, self.b)
    }
}

/// Learned layer-norm gain and bias.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub(crate) fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Norm {
            gain: store.insert(format!("{name}.gain"), Array::filled(1, dim, 1.0))?,
            bias: store.insert(format!("{name}.bias"), Array::zeros(1, dim))?,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.layer_norm_affine(x, self.gain, self.bias)
    }
}

#[derive(Clone, Debug)]
pub enum Backbone {
    Mlp(Mlp),
    LstmSs(Lstm),
    Lstm(Lstm),
    Transformer(Transformer),
}

/// Tokenizer, backbone and their parameters.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    tokenizer: Tokenizer,
    backbone: Backbone,
}

impl Model {
    /// Builds a freshly initialised model; initial weights depend only on
    /// `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let tokenizer = Tokenizer::new(&mut store, config.tokenizer(), &mut rng)?;
        let backbone = match config.kind {
            ModelKind::Mlp => Backbone::Mlp(Mlp::new(&mut store, &config, &mut rng)?),
            ModelKind::LstmSs => Backbone::LstmSs(Lstm::new(&mut store, &config, false, &mut rng)?),
            ModelKind::Lstm => Backbone::Lstm(Lstm::new(&mut store, &config, true, &mut rng)?),
            ModelKind::Transformer => Backbone::Transformer(Transformer::new(&mut store, &config, &mut rng)?),
        };
        Ok(Model {
            config,
            store,
            tokenizer,
            backbone,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn is_single_step(&self) -> bool {
        self.config.kind.is_single_step()
    }

    /// Rows of `Θ` the model emits: `L`, or 1 for single-step models.
    pub fn output_rows(&self) -> usize {
        if self.is_single_step() {
            1
        } else {
            self.config.horizon_len
        }
    }

    /// Raw parameters from an already embedded history `U` (`H × S`).
    pub fn theta_from_tokens(&self, g: &mut Graph, u: Var) -> Result<Var> {
        let (h, s) = g.shape(u);
        if h != self.config.history_len || s != self.config.token_dim {
            return Err(Error::shape(
                "model",
                format!(
                    "U is {h}×{s}, expected {}×{}",
                    self.config.history_len, self.config.token_dim
                ),
            ));
        }
        let mode = self.config.decode_mode;
        match &self.backbone {
            Backbone::Mlp(m) => {
                let last = g.slice_rows(u, h - 1, h)?;
                m.forward(g, last)
            }
            Backbone::LstmSs(l) => l.single_step(g, u),
            Backbone::Lstm(l) => l.forecast(g, u, self.config.horizon_len, mode),
            Backbone::Transformer(t) => t.forward(g, u, mode),
        }
    }

    /// Raw parameters `Θ` for one history window.
    pub fn theta(&self, g: &mut Graph, history: &[PacketRecord], norm: &NormStats) -> Result<Var> {
        if let Backbone::Mlp(m) = &self.backbone {
            if history.len() != self.config.history_len {
                return Err(Error::shape(
                    "model",
                    format!("history has {} records, expected {}", history.len(), self.config.history_len),
                ));
            }
            let last = PacketFeatures::pending(&history[history.len() - 1], norm, self.tokenizer.config())?;
            let token = self.tokenizer.embed_packet(g, &last)?;
            return m.forward(g, token);
        }
        let u = self.tokenizer.embed_window(g, history, norm, self.config.history_len)?;
        self.theta_from_tokens(g, u)
    }

    /// Inference-mode forecast: one mixture per future step (single-step
    /// models repeat their shared mixture).
    pub fn predict(&self, history: &[PacketRecord], norm: &NormStats) -> Result<Vec<MixtureParams>> {
        let mut g = Graph::inference(&self.store);
        let theta = self.theta(&mut g, history, norm)?;
        let value = g.value(theta);
        if !value.is_finite() {
            return Err(Error::NonFinite("model output".into()));
        }
        let rows = decode_rows(value)?;
        if self.is_single_step() {
            Ok(vec![rows[0].clone(); self.config.horizon_len])
        } else {
            Ok(rows)
        }
    }
}

/// Exact number of trainable scalars for `config`.
pub fn param_count(config: &ModelConfig) -> Result<usize> {
    Ok(Model::new(config.clone(), 0)?.param_count())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_round_trip() {
        for k in ModelKind::ALL {
            assert_eq!(k.as_str().parse::<ModelKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.as_str()));
        }
        assert!("gru".parse::<ModelKind>().is_err());
    }

    #[test]
    fn heads_must_divide_token_dim() {
        let cfg = ModelConfig {
            token_dim: 10,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn mixture_head_bias_spread() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = Dense::mixture_head(&mut store, &mut rng, "h", 4, 3).unwrap();
        assert_eq!(&store.value(d.b).data()[3..6], &[-1.5, 0.0, 1.5]);
    }
}
