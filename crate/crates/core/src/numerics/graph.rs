//! Tape-based reverse-mode differentiation over matrices.
//!
//! A [`Graph`] records every intermediate value of one forward pass. Nodes
//! are appended in evaluation order, so a reverse sweep over the node list
//! visits each node after all of its consumers. Parameters enter the graph
//! through [`Graph::param`]; frozen parameters (or every parameter, for a
//! graph built with `track = false`) become constants and never get a
//! gradient slot, though gradients still flow *through* the ops that use
//! them.

use std::collections::HashMap;

use super::tensor::gemm;
use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    ScaleBy(Var, Var),
    Gelu(Var),
    Tanh(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, causal: bool, probs: Vec<f64> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    Reshape(Var),
    MeanRows(Var),
    Sum(Var),
    Mse(Var, Var),
    NodeReadout { x: Var, w: Var, b: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    track: bool,
    bound: HashMap<ParamId, Var>,
}

impl Graph {
    /// A graph that records gradients for non-frozen parameters.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), track: true, bound: HashMap::new() }
    }

    /// A forward-only graph: every parameter is a constant.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), track: false, bound: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant leaf. Vectors are stored as `[1, n]`.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = as_matrix(t);
        self.push(t, Op::Leaf, false)
    }

    /// Binds a parameter from `store`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let needs = self.track && !store.is_frozen(id);
        let v = self.push(as_matrix(store.get(id).clone()), Op::Leaf, needs);
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul [{n}x{k}] x [{k2}x{m}]")));
        }
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, 1.0, self.value(a).data(), (k, 1), self.value(b).data(), (m, 1), 0.0, &mut out);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::matrix(n, m, out), Op::MatMul(a, b), g))
    }

    /// `a + b` with `b` a `[1, m]` row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, m) = self.shape(a);
        if self.shape(b) != (1, m) {
            return Err(Error::Shape(format!("add_row [{n}x{m}] + {:?}", self.shape(b))));
        }
        let bias = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::matrix(n, m, out), Op::AddRow(a, b), g))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (n, m) = self.same_shape(a, b, what)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::matrix(n, m, out), op, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let g = self.nodes[a.0].needs_grad;
        self.push(out, op, g)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddConst(a))
    }

    /// `s · a` with `s` a `[1, 1]` node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::Shape(format!("scale_by expects a scalar, got {:?}", self.shape(s))));
        }
        let c = self.value(s).item();
        let out = self.value(a).map(|x| c * x);
        let g = self.any_grad(&[a, s]);
        Ok(self.push(out, Op::ScaleBy(a, s), g))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// Row-wise layer normalisation with learned `gamma`, `beta` rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, m) = self.shape(x);
        if self.shape(gamma) != (1, m) || self.shape(beta) != (1, m) {
            return Err(Error::Shape(format!("layer_norm over {m} columns")));
        }
        let xs = self.value(x).data();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let mut out = vec![0.0; n * m];
        let mut xhat = vec![0.0; n * m];
        let mut inv_std = vec![0.0; n];
        for r in 0..n {
            let row = &xs[r * m..(r + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..m {
                let h = (row[c] - mean) * inv;
                xhat[r * m + c] = h;
                out[r * m + c] = h * gs[c] + bs[c];
            }
        }
        let g = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(Tensor::matrix(n, m, out), Op::LayerNorm { x, gamma, beta, xhat, inv_std }, g))
    }

    /// Scaled dot-product attention split over `heads` column blocks.
    ///
    /// With `causal`, query row `i` sees key rows `0..=i` only and the
    /// arithmetic for row `i` never touches later rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (tq, d) = self.shape(q);
        let (tk, dk) = self.shape(k);
        let (tv, dv) = self.shape(v);
        if dk != d || dv != d || tv != tk || heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!(
                "attention q[{tq}x{d}] k[{tk}x{dk}] v[{tv}x{dv}] heads={heads}"
            )));
        }
        if causal && tq != tk {
            return Err(Error::Shape(format!("causal attention needs square scores, got {tq}x{tk}")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; tq * d];
        let mut probs = vec![0.0; heads * tq * tk];
        let mut scores = vec![0.0; tk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let jmax = if causal { i + 1 } else { tk };
                let qi = &qs[i * d + off..i * d + off + dh];
                let mut mx = f64::NEG_INFINITY;
                for j in 0..jmax {
                    let kj = &ks[j * d + off..j * d + off + dh];
                    let s = scale * dot(qi, kj);
                    scores[j] = s;
                    mx = mx.max(s);
                }
                let mut sum = 0.0;
                for s in scores.iter_mut().take(jmax) {
                    *s = (*s - mx).exp();
                    sum += *s;
                }
                let p = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                let o = &mut out[i * d + off..i * d + off + dh];
                for j in 0..jmax {
                    let pj = scores[j] / sum;
                    p[j] = pj;
                    let vj = &vs[j * d + off..j * d + off + dh];
                    for c in 0..dh {
                        o[c] += pj * vj[c];
                    }
                }
            }
        }
        let g = self.any_grad(&[q, k, v]);
        Ok(self.push(Tensor::matrix(tq, d, out), Op::Attention { q, k, v, heads, causal, probs }, g))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.shape(*parts.first().ok_or_else(|| Error::Empty("concat_rows".into()))?).1;
        let mut out = Vec::new();
        for &p in parts {
            if self.shape(p).1 != m {
                return Err(Error::Shape(format!("concat_rows: width {m} vs {}", self.shape(p).1)));
            }
            out.extend_from_slice(self.value(p).data());
        }
        let n = out.len() / m;
        let g = self.any_grad(parts);
        Ok(self.push(Tensor::matrix(n, m, out), Op::ConcatRows(parts.to_vec()), g))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.shape(*parts.first().ok_or_else(|| Error::Empty("concat_cols".into()))?).0;
        if parts.iter().any(|&p| self.shape(p).0 != n) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let m: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(n * m);
        for r in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let g = self.any_grad(parts);
        Ok(self.push(Tensor::matrix(n, m, out), Op::ConcatCols(parts.to_vec()), g))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.shape(a);
        if len == 0 || start + len > n {
            return Err(Error::Shape(format!("slice_rows {start}..{} of {n}", start + len)));
        }
        let out = self.value(a).data()[start * m..(start + len) * m].to_vec();
        let g = self.nodes[a.0].needs_grad;
        Ok(self.push(Tensor::matrix(len, m, out), Op::SliceRows(a, start), g))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (n, m) = self.shape(a);
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(Error::Shape(format!("gather_rows {idx:?} from {n} rows")));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            out.extend_from_slice(src.row_slice(i));
        }
        let g = self.nodes[a.0].needs_grad;
        Ok(self.push(Tensor::matrix(idx.len(), m, out), Op::GatherRows(a, idx.to_vec()), g))
    }

    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (n, m) = self.shape(a);
        if idx.is_empty() || idx.iter().any(|&i| i >= m) {
            return Err(Error::Shape(format!("gather_cols {idx:?} from {m} cols")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(n * idx.len());
        for r in 0..n {
            for &c in idx {
                out.push(src[r * m + c]);
            }
        }
        let g = self.nodes[a.0].needs_grad;
        Ok(self.push(Tensor::matrix(n, idx.len(), out), Op::GatherCols(a, idx.to_vec()), g))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(a);
        if t.len() != rows * cols {
            return Err(Error::Shape(format!("reshape {} values into [{rows}x{cols}]", t.len())));
        }
        let out = Tensor::matrix(rows, cols, t.data().to_vec());
        let g = self.nodes[a.0].needs_grad;
        Ok(self.push(out, Op::Reshape(a), g))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let src = self.value(a).data();
        let mut out = vec![0.0; m];
        for row in src.chunks(m) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        let g = self.nodes[a.0].needs_grad;
        self.push(Tensor::matrix(1, m, out), Op::MeanRows(a), g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let g = self.nodes[a.0].needs_grad;
        self.push(Tensor::scalar(s), Op::Sum(a), g)
    }

    /// Mean of squared differences, as a `[1, 1]` node.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "mse")?;
        let a = self.value(pred).data();
        let b = self.value(target).data();
        let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        let v = s / a.len() as f64;
        let g = self.any_grad(&[pred, target]);
        Ok(self.push(Tensor::scalar(v), Op::Mse(pred, target), g))
    }

    /// Per-node affine readout: row `r` of `x` uses weight block `r % N`.
    ///
    /// `w` is `[N, din·dout]` (row-major `din×dout` blocks), `b` is `[N, dout]`.
    pub fn node_readout(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (r, din) = self.shape(x);
        let (nodes, wcols) = self.shape(w);
        let (bn, dout) = self.shape(b);
        if bn != nodes || wcols != din * dout || r % nodes != 0 {
            return Err(Error::Shape(format!(
                "node_readout x[{r}x{din}] w[{nodes}x{wcols}] b[{bn}x{dout}]"
            )));
        }
        let (xs, ws, bs) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; r * dout];
        for row in 0..r {
            let n = row % nodes;
            let xr = &xs[row * din..(row + 1) * din];
            let wn = &ws[n * wcols..(n + 1) * wcols];
            let o = &mut out[row * dout..(row + 1) * dout];
            o.copy_from_slice(&bs[n * dout..(n + 1) * dout]);
            for (i, &xi) in xr.iter().enumerate() {
                for (oc, wv) in o.iter_mut().zip(&wn[i * dout..(i + 1) * dout]) {
                    *oc += xi * wv;
                }
            }
        }
        let g = self.any_grad(&[x, w, b]);
        Ok(self.push(Tensor::matrix(r, dout, out), Op::NodeReadout { x, w, b }, g))
    }

    /// Reverse sweep from a scalar `loss`, returning parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            // Leaves keep their gradient for collection below.
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gout);
                continue;
            }
            self.backprop_node(node, &gout, &mut grads);
        }
        let mut out = Gradients::new(0);
        for (&id, &v) in &self.bound {
            if let Some(g) = grads.get_mut(v.0).and_then(Option::take) {
                let shape = self.nodes[v.0].value.shape().to_vec();
                out.insert(id, Tensor::new(shape, g).expect("gradient shape"));
            }
        }
        Ok(out)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.shape(*a);
                let m = self.shape(*b).1;
                if let Some(da) = self.slot(grads, *a) {
                    // dA += dC · Bᵀ
                    gemm(n, m, k, 1.0, g, (m, 1), val(*b), (1, m), 1.0, da);
                }
                if let Some(db) = self.slot(grads, *b) {
                    // dB += Aᵀ · dC
                    gemm(k, n, m, 1.0, val(*a), (1, k), g, (m, 1), 1.0, db);
                }
            }
            Op::AddRow(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    add_into(da, g);
                }
                let m = self.shape(*b).1;
                if let Some(db) = self.slot(grads, *b) {
                    for row in g.chunks(m) {
                        add_into(db, row);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    add_into(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    for (d, gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, gv), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, gv), x) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = self.slot(grads, *a) {
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += gv * c;
                    }
                }
            }
            Op::AddConst(a) | Op::Reshape(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    add_into(da, g);
                }
            }
            Op::ScaleBy(a, s) => {
                let c = val(*s)[0];
                let av = val(*a);
                if let Some(da) = self.slot(grads, *a) {
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += gv * c;
                    }
                }
                if let Some(ds) = self.slot(grads, *s) {
                    ds[0] += g.iter().zip(av).map(|(gv, x)| gv * x).sum::<f64>();
                }
            }
            Op::Gelu(a) => {
                let av = val(*a);
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, gv), &x) in da.iter_mut().zip(g).zip(av) {
                        *d += gv * gelu_grad(x);
                    }
                }
            }
            Op::Tanh(a) => {
                let yv = node.value.data();
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, gv), y) in da.iter_mut().zip(g).zip(yv) {
                        *d += gv * (1.0 - y * y);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (n, m) = self.shape(*x);
                let gs = val(*gamma);
                if let Some(dg) = self.slot(grads, *gamma) {
                    for r in 0..n {
                        for c in 0..m {
                            dg[c] += g[r * m + c] * xhat[r * m + c];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for row in g.chunks(m) {
                        add_into(db, row);
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let mut dxhat = vec![0.0; m];
                    for r in 0..n {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..m {
                            let d = g[r * m + c] * gs[c];
                            dxhat[c] = d;
                            mean_d += d;
                            mean_dx += d * xhat[r * m + c];
                        }
                        mean_d /= m as f64;
                        mean_dx /= m as f64;
                        for c in 0..m {
                            dx[r * m + c] +=
                                inv_std[r] * (dxhat[c] - mean_d - xhat[r * m + c] * mean_dx);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, causal, probs } => {
                self.backprop_attention(*q, *k, *v, *heads, *causal, probs, g, grads);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    if let Some(dp) = self.slot(grads, p) {
                        add_into(dp, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.rows();
                let m = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if let Some(dp) = self.slot(grads, p) {
                        for r in 0..n {
                            add_into(&mut dp[r * w..(r + 1) * w], &g[r * m + col..r * m + col + w]);
                        }
                    }
                    col += w;
                }
            }
            Op::SliceRows(a, start) => {
                let m = self.shape(*a).1;
                if let Some(da) = self.slot(grads, *a) {
                    add_into(&mut da[start * m..start * m + g.len()], g);
                }
            }
            Op::GatherRows(a, idx) => {
                let m = self.shape(*a).1;
                if let Some(da) = self.slot(grads, *a) {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut da[i * m..(i + 1) * m], &g[k * m..(k + 1) * m]);
                    }
                }
            }
            Op::GatherCols(a, idx) => {
                let (n, m) = self.shape(*a);
                let w = idx.len();
                if let Some(da) = self.slot(grads, *a) {
                    for r in 0..n {
                        for (k, &c) in idx.iter().enumerate() {
                            da[r * m + c] += g[r * w + k];
                        }
                    }
                }
            }
            Op::MeanRows(a) => {
                let (n, m) = self.shape(*a);
                if let Some(da) = self.slot(grads, *a) {
                    for r in 0..n {
                        for c in 0..m {
                            da[r * m + c] += g[c] / n as f64;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (val(*p), val(*t));
                let c = 2.0 * g[0] / pv.len() as f64;
                if let Some(dp) = self.slot(grads, *p) {
                    for ((d, a), b) in dp.iter_mut().zip(pv).zip(tv) {
                        *d += c * (a - b);
                    }
                }
                if let Some(dt) = self.slot(grads, *t) {
                    for ((d, a), b) in dt.iter_mut().zip(pv).zip(tv) {
                        *d -= c * (a - b);
                    }
                }
            }
            Op::NodeReadout { x, w, b } => {
                let (r, din) = self.shape(*x);
                let (nodes, wcols) = self.shape(*w);
                let dout = self.shape(*b).1;
                let (xs, ws) = (val(*x), val(*w));
                if let Some(dx) = self.slot(grads, *x) {
                    for row in 0..r {
                        let n = row % nodes;
                        let gr = &g[row * dout..(row + 1) * dout];
                        for i in 0..din {
                            let wrow = &ws[n * wcols + i * dout..n * wcols + (i + 1) * dout];
                            dx[row * din + i] += dot(gr, wrow);
                        }
                    }
                }
                if let Some(dw) = self.slot(grads, *w) {
                    for row in 0..r {
                        let n = row % nodes;
                        let gr = &g[row * dout..(row + 1) * dout];
                        for i in 0..din {
                            let xi = xs[row * din + i];
                            let base = n * wcols + i * dout;
                            for (d, gv) in dw[base..base + dout].iter_mut().zip(gr) {
                                *d += xi * gv;
                            }
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for row in 0..r {
                        let n = row % nodes;
                        add_into(&mut db[n * dout..(n + 1) * dout], &g[row * dout..(row + 1) * dout]);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (tq, d) = self.shape(q);
        let tk = self.shape(k).0;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qs = self.nodes[q.0].value.data();
        let ks = self.nodes[k.0].value.data();
        let vs = self.nodes[v.0].value.data();
        let (nq, nk, nv) = (self.nodes[q.0].needs_grad, self.nodes[k.0].needs_grad, self.nodes[v.0].needs_grad);
        let mut dq = vec![0.0; if nq { tq * d } else { 0 }];
        let mut dk = vec![0.0; if nk { tk * d } else { 0 }];
        let mut dv = vec![0.0; if nv { tk * d } else { 0 }];
        let mut dp = vec![0.0; tk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let jmax = if causal { i + 1 } else { tk };
                let p = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                let gi = &g[i * d + off..i * d + off + dh];
                let mut wsum = 0.0;
                for j in 0..jmax {
                    let vj = &vs[j * d + off..j * d + off + dh];
                    dp[j] = dot(gi, vj);
                    wsum += p[j] * dp[j];
                    if nv {
                        for c in 0..dh {
                            dv[j * d + off + c] += p[j] * gi[c];
                        }
                    }
                }
                for j in 0..jmax {
                    let ds = p[j] * (dp[j] - wsum) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    if nq {
                        for c in 0..dh {
                            dq[i * d + off + c] += ds * ks[j * d + off + c];
                        }
                    }
                    if nk {
                        for c in 0..dh {
                            dk[j * d + off + c] += ds * qs[i * d + off + c];
                        }
                    }
                }
            }
        }
        if let Some(s) = self.slot(grads, q) {
            add_into(s, &dq);
        }
        if let Some(s) = self.slot(grads, k) {
            add_into(s, &dk);
        }
        if let Some(s) = self.slot(grads, v) {
            add_into(s, &dv);
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn as_matrix(t: Tensor) -> Tensor {
    if t.shape().len() == 2 {
        t
    } else {
        let (r, c) = (t.rows(), t.cols());
        t.reshape(vec![r, c]).expect("same length")
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
