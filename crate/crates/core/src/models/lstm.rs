use rand::Rng;

use super::{DecodeMode, Dense, ModelConfig};
use crate::diff::{glorot, uniform, Array, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

/// One recurrent layer. Gate pre-activations are `x·W_x + h·W_h + b` with the
/// four gates laid out `[input, forget, cell, output]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmLayer {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    hidden: usize,
}

/// Per-layer `(h, c)`, each `1 × hidden`.
#[derive(Clone, Debug)]
pub struct LstmState {
    pub layers: Vec<(Var, Var)>,
}

impl LstmState {
    pub fn zeros(g: &mut Graph, layers: usize, hidden: usize) -> Self {
        LstmState {
            layers: (0..layers)
                .map(|_| (g.constant(Array::zeros(1, hidden)), g.constant(Array::zeros(1, hidden))))
                .collect(),
        }
    }

    pub fn top_hidden(&self) -> Var {
        self.layers[self.layers.len() - 1].0
    }
}

impl LstmLayer {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, input: usize, hidden: usize) -> Result<Self> {
        let mut b = Array::zeros(1, 4 * hidden);
        b.row_mut(0)[hidden..2 * hidden].fill(1.0);
        Ok(LstmLayer {
            w_x: store.insert(format!("{name}.w_x"), glorot(rng, input, 4 * hidden))?,
            w_h: store.insert(format!("{name}.w_h"), glorot(rng, hidden, 4 * hidden))?,
            b: store.insert(format!("{name}.b"), b)?,
            hidden,
        })
    }

    /// One gated update of `(h, c)` for input row `u`.
    pub fn cell(&self, g: &mut Graph, u: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let pre = g.linear(u, self.w_x, self.b)?;
        self.step(g, pre, h, c)
    }

    fn step(&self, g: &mut Graph, pre: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let w_h = g.param(self.w_h);
        let rec = g.matmul(h, w_h)?;
        let gates = g.add(pre, rec)?;
        let hc = g.lstm_pointwise(gates, c)?;
        let n = self.hidden;
        Ok((g.slice_cols(hc, 0, n)?, g.slice_cols(hc, n, 2 * n)?))
    }

    /// Runs the layer over every row of `inputs` from `(h, c)`; returns the
    /// stacked hidden states and the final state.
    fn run(&self, g: &mut Graph, inputs: Var, h: Var, c: Var) -> Result<(Var, (Var, Var))> {
        let pre = g.linear(inputs, self.w_x, self.b)?;
        let steps = g.shape(inputs).0;
        let (mut h, mut c) = (h, c);
        let mut hs = Vec::with_capacity(steps);
        for i in 0..steps {
            let p = if steps == 1 { pre } else { g.slice_rows(pre, i, i + 1)? };
            (h, c) = self.step(g, p, h, c)?;
            hs.push(h);
        }
        let stacked = if steps == 1 { hs[0] } else { g.concat_rows(&hs)? };
        Ok((stacked, (h, c)))
    }
}

/// Stacked LSTM used both as the single-step readout and as the multi-step
/// generator.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub layers: Vec<LstmLayer>,
    pub head: Dense,
    /// Generation-step input token.
    pub pad: Option<ParamId>,
    /// Maps a previous step's raw output back to an input token.
    pub feedback: Option<Dense>,
    hidden: usize,
    dropout: f64,
}

impl Lstm {
    pub(crate) fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, multi_step: bool, rng: &mut R) -> Result<Self> {
        let s = cfg.token_dim;
        let layers = (0..cfg.n_rec)
            .map(|i| LstmLayer::new(store, rng, &format!("lstm{i}"), s, s))
            .collect::<Result<Vec<_>>>()?;
        let head = Dense::mixture_head(store, rng, "head", s, cfg.mixture_components)?;
        let (pad, feedback) = if multi_step {
            (
                Some(store.insert("lstm.pad", uniform(rng, 1, s, 0.5))?),
                Some(Dense::new(store, rng, "lstm.feedback", cfg.raw_dim(), s)?),
            )
        } else {
            (None, None)
        };
        Ok(Lstm {
            layers,
            head,
            pad,
            feedback,
            hidden: s,
            dropout: cfg.dropout,
        })
    }

    /// Runs every layer over the rows of `inputs` starting from `state`;
    /// returns the top layer's hidden states and the final state.
    pub fn run(&self, g: &mut Graph, inputs: Var, state: &LstmState) -> Result<(Var, LstmState)> {
        if g.shape(inputs).1 != self.hidden {
            return Err(Error::shape(
                "lstm",
                format!("input width {}, expected {}", g.shape(inputs).1, self.hidden),
            ));
        }
        let mut x = inputs;
        let mut finals = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (h0, c0) = state.layers[i];
            let (hs, last) = layer.run(g, x, h0, c0)?;
            finals.push(last);
            x = if i + 1 < self.layers.len() { g.dropout(hs, self.dropout) } else { hs };
        }
        Ok((x, LstmState { layers: finals }))
    }

    /// Consumes the history `U` from zero states.
    pub fn encode(&self, g: &mut Graph, u: Var) -> Result<LstmState> {
        let zero = LstmState::zeros(g, self.layers.len(), self.hidden);
        Ok(self.run(g, u, &zero)?.1)
    }

    /// Single θ (`1 × V`) from the top layer's last hidden state.
    pub fn single_step(&self, g: &mut Graph, u: Var) -> Result<Var> {
        let state = self.encode(g, u)?;
        let h = g.dropout(state.top_hidden(), self.dropout);
        self.head.apply(g, h)
    }

    /// `Θ` (`L × V`). Generation starts from the history's final states.
    ///
    /// Parallel mode feeds the pad token at every step. Autoregressive mode
    /// feeds the pad token first and then the re-embedded previous output,
    /// re-running the generator over the whole prefix at every step.
    pub fn forecast(&self, g: &mut Graph, u: Var, horizon: usize, mode: DecodeMode) -> Result<Var> {
        let (pad, feedback) = match (self.pad, self.feedback) {
            (Some(p), Some(f)) => (p, f),
            _ => return Err(Error::Config("single-step LSTM has no generator".into())),
        };
        if horizon == 0 {
            return Err(Error::shape("lstm_forecast", "horizon must be at least 1"));
        }
        let seed = self.encode(g, u)?;
        let pad = g.param(pad);
        match mode {
            DecodeMode::Parallel => {
                let inputs = g.gather_rows(pad, vec![0; horizon])?;
                let (top, _) = self.run(g, inputs, &seed)?;
                let top = g.dropout(top, self.dropout);
                self.head.apply(g, top)
            }
            DecodeMode::Autoregressive => {
                let mut inputs = vec![pad];
                let mut outputs = Vec::with_capacity(horizon);
                for step in 0..horizon {
                    let x = if inputs.len() == 1 { inputs[0] } else { g.concat_rows(&inputs)? };
                    let (top, _) = self.run(g, x, &seed)?;
                    let last = g.slice_rows(top, step, step + 1)?;
                    let last = g.dropout(last, self.dropout);
                    let theta = self.head.apply(g, last)?;
                    outputs.push(theta);
                    if step + 1 < horizon {
                        inputs.push(feedback.apply(g, theta)?);
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
}
