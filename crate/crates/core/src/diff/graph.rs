use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::{matmul_acc, matmul_t_acc, t_matmul_acc};
use super::{Array, Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// A differentiable operator defined outside this module.
///
/// `backward` returns one gradient per input, shaped like that input.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Array]) -> Result<Array>;
    fn backward(&self, inputs: &[&Array], output: &Array, grad: &Array) -> Vec<Array>;
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Affine(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    Dropout(Var, Vec<f64>),
    LstmPointwise(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
    Sum(Var),
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

struct Node {
    value: Array,
    op: Op,
}

const LN_EPS: f64 = 1e-5;

/// Recording context for one forward pass.
///
/// Every operation appends a node to the tape; [`Graph::backward`] walks the
/// tape in reverse and returns gradients for the parameters of the bound
/// [`ParamStore`]. Dropout masks are drawn from the graph's own seeded stream,
/// so a fixed seed reproduces a training step exactly.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    training: bool,
    rng: ChaCha8Rng,
}

impl<'p> Graph<'p> {
    /// Inference graph: dropout disabled.
    pub fn inference(store: &'p ParamStore) -> Self {
        Self::with_mode(store, false, 0)
    }

    /// Training graph with dropout masks drawn from `seed`.
    pub fn training(store: &'p ParamStore, seed: u64) -> Self {
        Self::with_mode(store, true, seed)
    }

    pub fn with_mode(store: &'p ParamStore, training: bool, seed: u64) -> Self {
        Graph {
            store,
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; store.len()],
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Array, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input (no gradient).
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = self.push(value, Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(out, Op::MatMulT(a, b)))
    }

    /// `x · w + b` with `b` a `1 × out` row broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols() != wv.rows() || bv.shape() != (1, wv.cols()) {
            return Err(Error::shape(
                "affine",
                format!("x {:?}, w {:?}, b {:?}", xv.shape(), wv.shape(), bv.shape()),
            ));
        }
        let mut out = Array::zeros(xv.rows(), wv.cols());
        for r in 0..out.rows() {
            out.row_mut(r).copy_from_slice(bv.data());
        }
        matmul_acc(xv, wv, &mut out);
        Ok(self.push(out, Op::Affine(x, w, b)))
    }

    /// Affine map with parameter handles.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let w = self.param(w);
        let b = self.param(b);
        self.affine(x, w, b)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    fn check_row(&self, op: &'static str, a: Var, row: Var) -> Result<()> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr != (1, sa.1) {
            return Err(Error::shape(op, format!("{sa:?} with row {sr:?}")));
        }
        Ok(())
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row("add_row", a, row)?;
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// Multiplies every row of `a` elementwise by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row("mul_row", a, row)?;
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o *= b;
            }
        }
        Ok(self.push(out, Op::MulRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a), |_, _| false);
        self.push(out, Op::Softmax(a))
    }

    /// Row-wise softmax over entries where `masked(row, col)` is false;
    /// masked entries get probability zero.
    pub fn softmax_masked(&mut self, a: Var, masked: impl Fn(usize, usize) -> bool) -> Var {
        let out = softmax_rows(self.value(a), masked);
        self.push(out, Op::Softmax(a))
    }

    /// Row-wise layer normalisation without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.cols() as f64;
        let mut out = x.clone();
        let mut inv_stds = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_stds.push(inv);
        }
        self.push(out, Op::LayerNorm(a, inv_stds))
    }

    /// Layer norm followed by the learned per-feature gain and bias.
    pub fn layer_norm_affine(&mut self, a: Var, gain: ParamId, bias: ParamId) -> Result<Var> {
        let n = self.layer_norm(a);
        let g = self.param(gain);
        let b = self.param(bias);
        let scaled = self.mul_row(n, g)?;
        self.add_row(scaled, b)
    }

    /// Inverted dropout. Identity outside training mode or when `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Var {
        if !self.training || rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mut out = self.value(a).clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(out, Op::Dropout(a, mask))
    }

    /// Fused LSTM pointwise update.
    ///
    /// `gates` is `n × 4h` pre-activations ordered `[input, forget, cell, output]`
    /// and `cell` is `n × h`. Returns `n × 2h` holding `[h', c']`.
    pub fn lstm_pointwise(&mut self, gates: Var, cell: Var) -> Result<Var> {
        let (z, c) = (self.value(gates), self.value(cell));
        let h = c.cols();
        if z.shape() != (c.rows(), 4 * h) {
            return Err(Error::shape(
                "lstm_pointwise",
                format!("gates {:?}, cell {:?}", z.shape(), c.shape()),
            ));
        }
        let mut out = Array::zeros(c.rows(), 2 * h);
        for r in 0..c.rows() {
            let zr = z.row(r);
            let cr = c.row(r);
            let or = out.row_mut(r);
            for j in 0..h {
                let i = sigmoid(zr[j]);
                let f = sigmoid(zr[h + j]);
                let g = zr[2 * h + j].tanh();
                let o = sigmoid(zr[3 * h + j]);
                let cn = f * cr[j] + i * g;
                or[j] = o * cn.tanh();
                or[h + j] = cn;
            }
        }
        Ok(self.push(out, Op::LstmPointwise(gates, cell)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Array::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0]).1;
        if parts.iter().any(|&p| self.shape(p).1 != cols) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols.max(1);
        let out = Array::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start > end || end > x.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{end} of {:?}", x.shape()),
            ));
        }
        let mut out = Array::zeros(x.rows(), end - start);
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..end]);
        }
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start > end || end > x.rows() {
            return Err(Error::shape(
                "slice_rows",
                format!("{start}..{end} of {:?}", x.shape()),
            ));
        }
        let c = x.cols();
        let out = Array::from_vec(end - start, c, x.data()[start * c..end * c].to_vec())?;
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::shape(
                "gather_rows",
                format!("index {bad} into {:?}", t.shape()),
            ));
        }
        let mut out = Array::zeros(ids.len(), t.cols());
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        Ok(self.push(out, Op::Gather(table, ids)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Array::scalar(s), Op::Sum(a))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let vals: Vec<&Array> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = op.forward(&vals)?;
        Ok(self.push(out, Op::Custom(op, inputs.to_vec())))
    }

    /// Reverse pass from a `1 × 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss must be 1×1, got {:?}", lv.shape()),
            ));
        }
        if !lv.item().is_finite() {
            return Err(Error::NonFinite(format!("loss = {}", lv.item())));
        }
        let mut grads: Vec<Option<Array>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Array::scalar(1.0));
        let mut out: Vec<Option<Array>> = vec![None; self.store.len()];

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out[id.0] = Some(g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = slot(&mut grads, *a, av);
                    matmul_t_acc(&g, bv, ga);
                    let gb = slot(&mut grads, *b, bv);
                    t_matmul_acc(av, &g, gb);
                }
                Op::MatMulT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = slot(&mut grads, *a, av);
                    matmul_acc(&g, bv, ga);
                    let gb = slot(&mut grads, *b, bv);
                    t_matmul_acc(&g, av, gb);
                }
                Op::Affine(x, w, b) => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let gx = slot(&mut grads, *x, xv);
                    matmul_t_acc(&g, wv, gx);
                    let gw = slot(&mut grads, *w, wv);
                    t_matmul_acc(xv, &g, gw);
                    let gb = slot(&mut grads, *b, self.value(*b));
                    col_sums_acc(&g, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, &g);
                    acc(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, &g);
                    acc_map(&mut grads, *b, &g, |v| -v);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    acc(&mut grads, *a, &ga);
                    acc(&mut grads, *b, &gb);
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *a, &g);
                    let gr = slot(&mut grads, *row, self.value(*row));
                    col_sums_acc(&g, gr);
                }
                Op::MulRow(a, row) => {
                    let av = self.value(*a);
                    let rv = self.value(*row);
                    let mut ga = g.clone();
                    let mut gr = Array::zeros(1, rv.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            let gv = g.get(r, c);
                            ga.set(r, c, gv * rv.data()[c]);
                            gr.data_mut()[c] += gv * av.get(r, c);
                        }
                    }
                    acc(&mut grads, *a, &ga);
                    acc(&mut grads, *row, &gr);
                }
                Op::Scale(a, c) => acc_map(&mut grads, *a, &g, |v| v * c),
                Op::Tanh(a) => {
                    let ga = g.zip_map(y, |gv, t| gv * (1.0 - t * t));
                    acc(&mut grads, *a, &ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(y, |gv, s| gv * s * (1.0 - s));
                    acc(&mut grads, *a, &ga);
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                    acc(&mut grads, *a, &ga);
                }
                Op::Gelu(a) => {
                    let ga = g.zip_map(self.value(*a), |gv, x| gv * gelu_grad(x));
                    acc(&mut grads, *a, &ga);
                }
                Op::Softmax(a) => {
                    let mut ga = g.clone();
                    for r in 0..g.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (c, v) in ga.row_mut(r).iter_mut().enumerate() {
                            *v = yr[c] * (gr[c] - dot);
                        }
                    }
                    acc(&mut grads, *a, &ga);
                }
                Op::LayerNorm(a, inv_stds) => {
                    let n = g.cols() as f64;
                    let mut ga = g.clone();
                    for r in 0..g.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                        let inv = inv_stds[r];
                        for (c, v) in ga.row_mut(r).iter_mut().enumerate() {
                            *v = inv * (gr[c] - mean_g - yr[c] * mean_gy);
                        }
                    }
                    acc(&mut grads, *a, &ga);
                }
                Op::Dropout(a, mask) => {
                    let mut ga = g.clone();
                    for (v, m) in ga.data_mut().iter_mut().zip(mask) {
                        *v *= m;
                    }
                    acc(&mut grads, *a, &ga);
                }
                Op::LstmPointwise(gates, cell) => {
                    let (z, c) = (self.value(*gates), self.value(*cell));
                    let h = c.cols();
                    let mut gz = Array::zeros(z.rows(), z.cols());
                    let mut gc = Array::zeros(c.rows(), h);
                    for r in 0..c.rows() {
                        let (zr, cr, yr, grow) = (z.row(r), c.row(r), y.row(r), g.row(r));
                        for j in 0..h {
                            let i = sigmoid(zr[j]);
                            let f = sigmoid(zr[h + j]);
                            let gg = zr[2 * h + j].tanh();
                            let o = sigmoid(zr[3 * h + j]);
                            let tc = yr[h + j].tanh();
                            let dh = grow[j];
                            let dc = grow[h + j] + dh * o * (1.0 - tc * tc);
                            let gzr = gz.row_mut(r);
                            gzr[j] = dc * gg * i * (1.0 - i);
                            gzr[h + j] = dc * cr[j] * f * (1.0 - f);
                            gzr[2 * h + j] = dc * i * (1.0 - gg * gg);
                            gzr[3 * h + j] = dh * tc * o * (1.0 - o);
                            gc.row_mut(r)[j] = dc * f;
                        }
                    }
                    acc(&mut grads, *gates, &gz);
                    acc(&mut grads, *cell, &gc);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let w = pv.cols();
                        let gp = slot(&mut grads, p, pv);
                        for r in 0..g.rows() {
                            for (d, s) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *d += s;
                            }
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let n = pv.len();
                        let gp = slot(&mut grads, p, pv);
                        for (d, s) in gp.data_mut().iter_mut().zip(&g.data()[off..off + n]) {
                            *d += s;
                        }
                        off += n;
                    }
                }
                Op::SliceCols(a, start) => {
                    let av = self.value(*a);
                    let ga = slot(&mut grads, *a, av);
                    for r in 0..g.rows() {
                        let dst = &mut ga.row_mut(r)[*start..*start + g.cols()];
                        for (d, s) in dst.iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
                Op::SliceRows(a, start) => {
                    let av = self.value(*a);
                    let c = av.cols();
                    let ga = slot(&mut grads, *a, av);
                    let dst = &mut ga.data_mut()[start * c..start * c + g.len()];
                    for (d, s) in dst.iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
                Op::Gather(table, ids) => {
                    let tv = self.value(*table);
                    let gt = slot(&mut grads, *table, tv);
                    for (r, &i) in ids.iter().enumerate() {
                        for (d, s) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
                Op::Sum(a) => {
                    let gv = g.item();
                    let (r, c) = self.shape(*a);
                    acc(&mut grads, *a, &Array::filled(r, c, gv));
                }
                Op::Custom(op, inputs) => {
                    let vals: Vec<&Array> = inputs.iter().map(|&v| self.value(v)).collect();
                    let gs = op.backward(&vals, y, &g);
                    for (&v, gv) in inputs.iter().zip(&gs) {
                        acc(&mut grads, v, gv);
                    }
                }
            }
        }
        Ok(Gradients(out))
    }
}

fn slot<'a>(grads: &'a mut [Option<Array>], v: Var, like: &Array) -> &'a mut Array {
    grads[v.0].get_or_insert_with(|| Array::zeros(like.rows(), like.cols()))
}

fn acc(grads: &mut [Option<Array>], v: Var, g: &Array) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(g),
        none => *none = Some(g.clone()),
    }
}

fn acc_map(grads: &mut [Option<Array>], v: Var, g: &Array, f: impl Fn(f64) -> f64) {
    let mapped = g.map(f);
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&mapped),
        none => *none = Some(mapped),
    }
}

fn col_sums_acc(g: &Array, out: &mut Array) {
    for r in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
}

fn softmax_rows(x: &Array, masked: impl Fn(usize, usize) -> bool) -> Array {
    let mut out = Array::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let xr = x.row(r);
        let max = xr
            .iter()
            .enumerate()
            .filter(|(c, _)| !masked(r, *c))
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let orow = out.row_mut(r);
        let mut total = 0.0;
        for (c, o) in orow.iter_mut().enumerate() {
            if !masked(r, c) {
                *o = (xr[c] - max).exp();
                total += *o;
            }
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[inline]
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Array)]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = values
            .iter()
            .map(|(n, v)| s.insert(*n, v.clone()).unwrap())
            .collect();
        (s, ids)
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let s = ParamStore::new();
        let mut g = Graph::inference(&s);
        let x = g.constant(Array::zeros(2, 5));
        let y = g.softmax(x);
        assert!(g.value(y).data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let s = ParamStore::new();
        let mut g = Graph::inference(&s);
        let x = g.constant(Array::filled(1, 6, 3.7));
        let y = g.layer_norm(x);
        assert!(g.value(y).data().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn sum_gives_ones() {
        let p = Array::from_rows(&[vec![1.0, -2.0], vec![0.5, 4.0]]).unwrap();
        let (s, ids) = store_with(&[("p", p)]);
        let mut g = Graph::inference(&s);
        let v = g.param(ids[0]);
        let l = g.sum(v);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(&s, ids[0]).data(), &[1.0; 4]);
    }

    #[test]
    fn half_square_norm_gives_p() {
        let p = Array::row_vector(vec![0.3, -1.2, 2.5]);
        let (s, ids) = store_with(&[("p", p.clone())]);
        let mut g = Graph::inference(&s);
        let v = g.param(ids[0]);
        let sq = g.mul(v, v).unwrap();
        let half = g.scale(sq, 0.5);
        let l = g.sum(half);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(&s, ids[0]).max_abs_diff(&p) < 1e-15);
    }

    #[test]
    fn non_contributing_param_gets_zero() {
        let (s, ids) = store_with(&[
            ("a", Array::row_vector(vec![1.0, 2.0])),
            ("b", Array::row_vector(vec![3.0])),
        ]);
        let mut g = Graph::inference(&s);
        let a = g.param(ids[0]);
        let l = g.sum(a);
        let grads = g.backward(l).unwrap();
        assert!(!grads.contributed(ids[1]));
        assert_eq!(grads.get(&s, ids[1]).data(), &[0.0]);
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let s = ParamStore::new();
        let mut g = Graph::inference(&s);
        let x = g.constant(Array::scalar(f64::NAN));
        assert!(matches!(g.backward(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn dropout_rate_zero_and_inference_are_identity() {
        let s = ParamStore::new();
        let mut g = Graph::training(&s, 1);
        let x = g.constant(Array::filled(3, 3, 2.0));
        assert_eq!(g.dropout(x, 0.0), x);
        let mut gi = Graph::inference(&s);
        let xi = gi.constant(Array::filled(3, 3, 2.0));
        assert_eq!(gi.dropout(xi, 0.5), xi);
    }

    #[test]
    fn dropout_masks_repeat_for_a_seed() {
        let s = ParamStore::new();
        let run = |seed| {
            let mut g = Graph::training(&s, seed);
            let x = g.constant(Array::filled(4, 8, 1.0));
            let y = g.dropout(x, 0.5);
            g.value(y).clone()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
        let kept = run(7).data().iter().filter(|&&v| v > 0.0).count();
        assert!(kept > 4 && kept < 28);
        assert!(run(7).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let s = ParamStore::new();
        let mut g = Graph::inference(&s);
        let x = g.constant(Array::from_rows(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).unwrap());
        let y = g.softmax_masked(x, |r, c| c > r);
        let v = g.value(y);
        assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
        let e = 1.0f64.exp();
        assert!((v.get(1, 0) - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert_eq!(v.get(1, 2), 0.0);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let s = ParamStore::new();
        let mut g = Graph::inference(&s);
        let a = g.constant(Array::zeros(2, 3));
        let b = g.constant(Array::zeros(3, 2));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("(2, 3)") && err.contains("(3, 2)"));
    }
}
