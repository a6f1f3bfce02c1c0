use rand::Rng;

use super::attention::{causal, multi_head_attention, AttentionWeights};
use super::{Dense, ModelConfig, Norm, DecodeMode};
use crate::diff::{uniform, Array, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

/// Interleaved sinusoidal encoding: even columns `sin(pos / 10000^(2i/S))`,
/// odd columns the matching cosine.
pub fn positional_encoding(length: usize, dim: usize) -> Array {
    let mut pe = Array::zeros(length, dim);
    for pos in 0..length {
        let row = pe.row_mut(pos);
        for i in (0..dim).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / dim as f64);
            row[i] = angle.sin();
            if i + 1 < dim {
                row[i + 1] = angle.cos();
            }
        }
    }
    pe
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub expand: Dense,
    pub project: Dense,
}

impl FeedForward {
    fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        hidden: usize,
        gain: f64,
    ) -> Result<Self> {
        Ok(FeedForward {
            expand: Dense::new(store, rng, &format!("{name}.expand"), dim, hidden)?,
            project: Dense::scaled(store, rng, &format!("{name}.project"), hidden, dim, gain)?,
        })
    }

    fn apply(&self, g: &mut Graph, x: Var, dropout: f64) -> Result<Var> {
        let h = self.expand.apply(g, x)?;
        let h = g.gelu(h);
        let h = g.dropout(h, dropout);
        self.project.apply(g, h)
    }
}

/// `norm(x + dropout(sub))`
fn residual(g: &mut Graph, x: Var, sub: Var, dropout: f64, norm: &Norm) -> Result<Var> {
    let sub = g.dropout(sub, dropout);
    let sum = g.add(x, sub)?;
    norm.apply(g, sum)
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayer {
    pub attention: AttentionWeights,
    pub norm1: Norm,
    pub ffn: FeedForward,
    pub norm2: Norm,
}

impl EncoderLayer {
    pub fn apply(&self, g: &mut Graph, x: Var, n_heads: usize, dropout: f64) -> Result<Var> {
        let a = multi_head_attention(g, x, x, n_heads, None, &self.attention)?;
        let x = residual(g, x, a, dropout, &self.norm1)?;
        let f = self.ffn.apply(g, x, dropout)?;
        residual(g, x, f, dropout, &self.norm2)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayer {
    pub self_attention: AttentionWeights,
    pub norm1: Norm,
    pub cross_attention: AttentionWeights,
    pub norm2: Norm,
    pub ffn: FeedForward,
    pub norm3: Norm,
}

impl DecoderLayer {
    pub fn apply(&self, g: &mut Graph, x: Var, memory: Var, n_heads: usize, dropout: f64) -> Result<Var> {
        let a = multi_head_attention(g, x, x, n_heads, Some(&causal), &self.self_attention)?;
        let x = residual(g, x, a, dropout, &self.norm1)?;
        let c = multi_head_attention(g, x, memory, n_heads, None, &self.cross_attention)?;
        let x = residual(g, x, c, dropout, &self.norm2)?;
        let f = self.ffn.apply(g, x, dropout)?;
        residual(g, x, f, dropout, &self.norm3)
    }
}

/// Post-norm encoder-decoder with learnable decoder queries `Q` (`L × S`).
#[derive(Clone, Debug)]
pub struct Transformer {
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub queries: ParamId,
    pub head: Dense,
    /// Maps a previous step's raw output back to a query row.
    pub feedback: Dense,
    n_heads: usize,
    dim: usize,
    dropout: f64,
}

impl Transformer {
    pub(crate) fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let s = cfg.token_dim;
        let hidden = cfg.ffn_expansion * s;
        // residual branches start small so the post-norm stack is near identity
        let gain = 1.0 / ((cfg.n_enc + cfg.n_dec).max(1) as f64).sqrt();
        let mut encoder = Vec::with_capacity(cfg.n_enc);
        for i in 0..cfg.n_enc {
            let p = format!("enc{i}");
            encoder.push(EncoderLayer {
                attention: AttentionWeights::new(store, rng, &format!("{p}.attn"), s, gain)?,
                norm1: Norm::new(store, &format!("{p}.norm1"), s)?,
                ffn: FeedForward::new(store, rng, &format!("{p}.ffn"), s, hidden, gain)?,
                norm2: Norm::new(store, &format!("{p}.norm2"), s)?,
            });
        }
        let mut decoder = Vec::with_capacity(cfg.n_dec);
        for i in 0..cfg.n_dec {
            let p = format!("dec{i}");
            decoder.push(DecoderLayer {
                self_attention: AttentionWeights::new(store, rng, &format!("{p}.self"), s, gain)?,
                norm1: Norm::new(store, &format!("{p}.norm1"), s)?,
                cross_attention: AttentionWeights::new(store, rng, &format!("{p}.cross"), s, gain)?,
                norm2: Norm::new(store, &format!("{p}.norm2"), s)?,
                ffn: FeedForward::new(store, rng, &format!("{p}.ffn"), s, hidden, gain)?,
                norm3: Norm::new(store, &format!("{p}.norm3"), s)?,
            });
        }
        let queries = store.insert("dec.queries", uniform(rng, cfg.horizon_len, s, 0.5))?;
        let head = Dense::mixture_head(store, rng, "head", s, cfg.mixture_components)?;
        let feedback = Dense::new(store, rng, "dec.feedback", cfg.raw_dim(), s)?;
        Ok(Transformer {
            encoder,
            decoder,
            queries,
            head,
            feedback,
            n_heads: cfg.n_heads,
            dim: s,
            dropout: cfg.dropout,
        })
    }

    fn add_positions(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (n, s) = g.shape(x);
        if s != self.dim {
            return Err(Error::shape("transformer", format!("input width {s}, expected {}", self.dim)));
        }
        let pe = g.constant(positional_encoding(n, s));
        let x = g.add(x, pe)?;
        Ok(g.dropout(x, self.dropout))
    }

    /// Encoder output `H_enc` (`H × S`).
    pub fn encode(&self, g: &mut Graph, u: Var) -> Result<Var> {
        let mut x = self.add_positions(g, u)?;
        for layer in &self.encoder {
            x = layer.apply(g, x, self.n_heads, self.dropout)?;
        }
        Ok(x)
    }

    fn decoder_stack(&self, g: &mut Graph, rows: Var, memory: Var) -> Result<Var> {
        let mut x = self.add_positions(g, rows)?;
        for layer in &self.decoder {
            x = layer.apply(g, x, memory, self.n_heads, self.dropout)?;
        }
        Ok(x)
    }

    /// `Θ` (`L × V`) from query rows `q` and encoder output `memory`.
    ///
    /// Parallel mode decodes every row of `q` in one pass. Autoregressive mode
    /// decodes step `l` from `[q₀, f(θ₀), …, f(θ_{l−1})]`, re-running the
    /// decoder over the whole prefix at every step.
    pub fn decode(&self, g: &mut Graph, q: Var, memory: Var, mode: DecodeMode) -> Result<Var> {
        let l = g.shape(q).0;
        if l == 0 {
            return Err(Error::shape("transformer_decode", "empty query matrix"));
        }
        match mode {
            DecodeMode::Parallel => {
                let x = self.decoder_stack(g, q, memory)?;
                self.head.apply(g, x)
            }
            DecodeMode::Autoregressive => {
                let mut rows = vec![g.slice_rows(q, 0, 1)?];
                let mut outputs = Vec::with_capacity(l);
                for step in 0..l {
                    let input = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows)? };
                    let x = self.decoder_stack(g, input, memory)?;
                    let last = g.slice_rows(x, step, step + 1)?;
                    let theta = self.head.apply(g, last)?;
                    outputs.push(theta);
                    if step + 1 < l {
                        rows.push(self.feedback.apply(g, theta)?);
                    }
                }
                if outputs.len() == 1 {
                    Ok(outputs[0])
                } else {
                    g.concat_rows(&outputs)
                }
            }
        }
    }

    pub fn forward(&self, g: &mut Graph, u: Var, mode: DecodeMode) -> Result<Var> {
        let memory = self.encode(g, u)?;
        let q = g.param(self.queries);
        self.decode(g, q, memory, mode)
    }
}
