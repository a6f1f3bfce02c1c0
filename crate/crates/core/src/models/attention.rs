use std::sync::Mutex;

use rand::Rng;

use super::Dense;
use crate::diff::{dot, Array, CustomOp, Graph, ParamStore, Var};
use crate::error::{Error, Result};

/// Query, key/value and output projections of one attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub query: Dense,
    /// Keys and values side by side, `S × 2S`.
    pub key_value: Dense,
    pub output: Dense,
}

impl AttentionWeights {
    /// `output_gain` scales the initial output projection.
    pub(crate) fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        output_gain: f64,
    ) -> Result<Self> {
        Ok(AttentionWeights {
            query: Dense::new(store, rng, &format!("{name}.q"), dim, dim)?,
            key_value: Dense::new(store, rng, &format!("{name}.kv"), dim, 2 * dim)?,
            output: Dense::scaled(store, rng, &format!("{name}.out"), dim, dim, output_gain)?,
        })
    }
}

/// Per-head `softmax(q_h k_hᵀ / √d) v_h` for all heads at once.
///
/// Inputs are projected queries (`n × S`) and keys/values (`m × 2S`); the
/// output is the `n × S` concatenation of the heads. Masked entries are
/// excluded before the softmax.
struct ScaledDotProduct {
    heads: usize,
    mask: Vec<bool>,
    probs: Mutex<Vec<f64>>,
}

impl ScaledDotProduct {
    fn masked(&self, m: usize, i: usize, j: usize) -> bool {
        !self.mask.is_empty() && self.mask[i * m + j]
    }
}

/// Head `h` of the keys (or values) as a `d × m` row-major block.
fn head_block(kv: &Array, col: usize, d: usize) -> Vec<f64> {
    let m = kv.rows();
    let mut out = vec![0.0; d * m];
    for j in 0..m {
        let src = &kv.row(j)[col..col + d];
        for c in 0..d {
            out[c * m + j] = src[c];
        }
    }
    out
}

impl CustomOp for ScaledDotProduct {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn forward(&self, inputs: &[&Array]) -> Result<Array> {
        let (q, kv) = (inputs[0], inputs[1]);
        let (n, s) = q.shape();
        let m = kv.rows();
        if kv.cols() != 2 * s || s % self.heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("q {:?}, kv {:?}, {} heads", q.shape(), kv.shape(), self.heads),
            ));
        }
        let d = s / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = Array::zeros(n, s);
        let mut probs = vec![0.0; self.heads * n * m];
        for h in 0..self.heads {
            let off = h * d;
            let kt = head_block(kv, off, d);
            let vt = head_block(kv, s + off, d);
            for i in 0..n {
                let p = &mut probs[(h * n + i) * m..(h * n + i + 1) * m];
                let qi = &q.row(i)[off..off + d];
                for (c, &qc) in qi.iter().enumerate() {
                    let qc = qc * scale;
                    for (r, k) in p.iter_mut().zip(&kt[c * m..(c + 1) * m]) {
                        *r += qc * k;
                    }
                }
                let mut max = f64::NEG_INFINITY;
                for (j, r) in p.iter().enumerate() {
                    if !self.masked(m, i, j) {
                        max = max.max(*r);
                    }
                }
                if max == f64::NEG_INFINITY {
                    p.fill(0.0);
                    continue;
                }
                let mut total = 0.0;
                for (j, r) in p.iter_mut().enumerate() {
                    *r = if self.masked(m, i, j) { 0.0 } else { (*r - max).exp() };
                    total += *r;
                }
                let inv = 1.0 / total;
                p.iter_mut().for_each(|r| *r *= inv);
                let oi = &mut out.row_mut(i)[off..off + d];
                for (c, o) in oi.iter_mut().enumerate() {
                    *o = dot(p, &vt[c * m..(c + 1) * m]);
                }
            }
        }
        *self.probs.lock().unwrap() = probs;
        Ok(out)
    }

    fn backward(&self, inputs: &[&Array], _output: &Array, grad: &Array) -> Vec<Array> {
        let (q, kv) = (inputs[0], inputs[1]);
        let (n, s) = q.shape();
        let m = kv.rows();
        let d = s / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let probs = self.probs.lock().unwrap();
        let mut gq = Array::zeros(n, s);
        let mut gkv = Array::zeros(m, 2 * s);
        let mut dp = vec![0.0; m];
        let mut ds = vec![0.0; m];
        for h in 0..self.heads {
            let off = h * d;
            let kt = head_block(kv, off, d);
            let vt = head_block(kv, s + off, d);
            let mut gkt = vec![0.0; d * m];
            let mut gvt = vec![0.0; d * m];
            for i in 0..n {
                let p = &probs[(h * n + i) * m..(h * n + i + 1) * m];
                let gi = &grad.row(i)[off..off + d];
                dp.fill(0.0);
                for (c, &gc) in gi.iter().enumerate() {
                    let (vrow, gvrow) = (&vt[c * m..(c + 1) * m], &mut gvt[c * m..(c + 1) * m]);
                    for j in 0..m {
                        dp[j] += gc * vrow[j];
                        gvrow[j] += gc * p[j];
                    }
                }
                let mean = dot(p, &dp);
                for j in 0..m {
                    ds[j] = scale * p[j] * (dp[j] - mean);
                }
                let qi = &q.row(i)[off..off + d];
                let gqi = &mut gq.row_mut(i)[off..off + d];
                for c in 0..d {
                    gqi[c] += dot(&ds, &kt[c * m..(c + 1) * m]);
                    let qc = qi[c];
                    for (g, v) in gkt[c * m..(c + 1) * m].iter_mut().zip(&ds) {
                        *g += qc * v;
                    }
                }
            }
            for j in 0..m {
                let row = gkv.row_mut(j);
                for c in 0..d {
                    row[off + c] += gkt[c * m + j];
                    row[s + off + c] += gvt[c * m + j];
                }
            }
        }
        vec![gq, gkv]
    }
}

/// Multi-head scaled dot-product attention of `queries` (`n × S`) over
/// `memory` (`m × S`).
///
/// `mask(i, j) == true` removes key `j` from query `i`'s softmax.
pub fn multi_head_attention(
    g: &mut Graph,
    queries: Var,
    memory: Var,
    n_heads: usize,
    mask: Option<&dyn Fn(usize, usize) -> bool>,
    w: &AttentionWeights,
) -> Result<Var> {
    let (n, s) = g.shape(queries);
    let m = g.shape(memory).0;
    if n_heads == 0 || s % n_heads != 0 || g.shape(memory).1 != s {
        return Err(Error::shape(
            "multi_head_attention",
            format!(
                "queries {:?}, memory {:?}, {n_heads} heads",
                g.shape(queries),
                g.shape(memory)
            ),
        ));
    }
    let q = w.query.apply(g, queries)?;
    let kv = w.key_value.apply(g, memory)?;
    let mask = match mask {
        Some(f) => (0..n * m).map(|k| f(k / m, k % m)).collect(),
        None => Vec::new(),
    };
    let op = ScaledDotProduct {
        heads: n_heads,
        mask,
        probs: Mutex::new(Vec::new()),
    };
    let joined = g.custom(Box::new(op), &[q, kv])?;
    w.output.apply(g, joined)
}

/// Causal mask: position `i` may attend to `j ≤ i` only.
pub(crate) fn causal(i: usize, j: usize) -> bool {
    j > i
}
