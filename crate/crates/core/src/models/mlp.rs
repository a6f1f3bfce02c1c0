use rand::Rng;

use super::{Dense, ModelConfig};
use crate::diff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

/// Four affine layers over the newest token: input projection, two residual
/// GELU blocks, and the mixture head.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub input: Dense,
    pub blocks: [Dense; 2],
    pub head: Dense,
    dim: usize,
    dropout: f64,
}

impl Mlp {
    pub(crate) fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let s = cfg.token_dim;
        let hidden = cfg.mlp_expansion * s;
        Ok(Mlp {
            input: Dense::new(store, rng, "mlp.in", s, hidden)?,
            blocks: [
                Dense::new(store, rng, "mlp.block0", hidden, hidden)?,
                Dense::new(store, rng, "mlp.block1", hidden, hidden)?,
            ],
            head: Dense::mixture_head(store, rng, "head", hidden, cfg.mixture_components)?,
            dim: s,
            dropout: cfg.dropout,
        })
    }

    /// θ (`1 × V`) from a single token.
    pub fn forward(&self, g: &mut Graph, token: Var) -> Result<Var> {
        if g.shape(token) != (1, self.dim) {
            return Err(Error::shape(
                "mlp",
                format!("token {:?}, expected (1, {})", g.shape(token), self.dim),
            ));
        }
        let x = self.input.apply(g, token)?;
        let x = g.gelu(x);
        let mut x = g.dropout(x, self.dropout);
        for block in &self.blocks {
            let y = block.apply(g, x)?;
            let y = g.gelu(y);
            let y = g.dropout(y, self.dropout);
            x = g.add(x, y)?;
        }
        self.head.apply(g, x)
    }
}
