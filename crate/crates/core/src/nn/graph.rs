//! Reverse-mode tape. Nodes are appended in evaluation order, so the tape
//! is already topologically sorted and `backward` walks it in reverse.

use rand::Rng as _;

use super::params::{Grads, ParamId, ParamStore};
use super::Tensor;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, rstd: Vec<f64> },
    Softmax(Var),
    Dropout { x: Var, mask: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Gather { table: Var, idx: Vec<usize> },
    MeanRows(Var),
    NormalizeRows { x: Var, norms: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Tensor },
    Mse(Var, Var),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Eval,
    /// Dropout active, masks drawn from a stream seeded here.
    Train { seed: u64 },
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    param_vars: Vec<Option<Var>>,
    mode: Mode,
    rng: Option<Rng>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore, mode: Mode) -> Self {
        let rng = match mode {
            Mode::Eval => None,
            Mode::Train { seed } => Some(rng::rng(seed, "dropout", 0)),
        };
        Graph { params, nodes: Vec::new(), grads: Vec::new(), param_vars: vec![None; params.len()], mode, rng }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn is_train(&self) -> bool {
        matches!(self.mode, Mode::Train { .. })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.get(*id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.is_finite() || matches!(op, Op::Input), "non-finite value from {op:?}");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(Tensor::zeros(0, 0), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= y;
        }
        self.push(out, Op::Sub(a, b))
    }

    /// Adds the `1 x n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let [_, n] = self.shape(a);
        assert_eq!(self.shape(b), [1, n], "add_row shape mismatch");
        let mut out = self.value(a).clone();
        let bias = self.value(b).data().to_vec();
        for r in 0..out.rows() {
            for (o, y) in out.row_mut(r).iter_mut().zip(&bias) {
                *o += y;
            }
        }
        self.push(out, Op::AddRow(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= y;
        }
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c))
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a))
    }

    /// Row-wise layer normalization with affine `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let [m, n] = xv.shape();
        let mut xhat = Tensor::zeros(m, n);
        let mut rstd = Vec::with_capacity(m);
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for (h, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *h = (v - mean) * rs;
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xhat.clone();
        for r in 0..m {
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = *o * g[j] + b[j];
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::Softmax(a))
    }

    /// Adds `-inf` above the diagonal: row `i` may only see columns `<= i`.
    pub fn causal_mask(&mut self, scores: Var) -> Var {
        let [m, n] = self.shape(scores);
        let mut mask = Tensor::zeros(m, n);
        for i in 0..m {
            for j in (i + 1)..n {
                mask.row_mut(i)[j] = -1e30;
            }
        }
        let mask = self.push(mask, Op::Input);
        self.add(scores, mask)
    }

    /// Inverted dropout; identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if rate <= 0.0 || self.rng.is_none() {
            return x;
        }
        let keep = 1.0 - rate;
        let n = self.value(x).len();
        let rng = self.rng.as_mut().expect("train mode");
        let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let mut out = self.value(x).clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(out, Op::Dropout { x, mask })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols());
        let mut data = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let out = Tensor::new(xv.rows(), len, data).expect("shape");
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0])[0];
        let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows);
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.rows());
        let c = xv.cols();
        let out = Tensor::new(len, c, xv.data()[start * c..(start + len) * c].to_vec()).expect("shape");
        self.push(out, Op::SliceRows { x, start })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.shape(parts[0])[1];
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols);
            data.extend_from_slice(pv.data());
        }
        let out = Tensor::new(data.len() / cols.max(1), cols, data).expect("shape");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    /// Looks up rows of `table` (an embedding lookup).
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let tv = self.value(table);
        let c = tv.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::new(idx.len(), c, data).expect("shape");
        self.push(out, Op::Gather { table, idx: idx.to_vec() })
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = vec![0.0; xv.cols()];
        for r in 0..xv.rows() {
            for (o, v) in out.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        let m = xv.rows() as f64;
        out.iter_mut().for_each(|o| *o /= m);
        self.push(Tensor::row_vector(out), Op::MeanRows(x))
    }

    /// Scales each row to unit L2 norm. Zero rows are a caller error.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(n > 0.0, "normalize_rows: zero row {r}");
            norms.push(n);
            out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
        self.push(out, Op::NormalizeRows { x, norms })
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of `logits`;
    /// `None` rows are masked out. Requires at least one target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "cross_entropy length mismatch");
        let count = targets.iter().flatten().count();
        assert!(count > 0, "cross_entropy with no targets");
        let probs = softmax_rows(lv);
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let row = lv.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += lse - row[t];
            }
        }
        let out = Tensor::scalar(loss / count as f64);
        self.push(out, Op::CrossEntropy { logits, targets: targets.to_vec(), probs })
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mse shape mismatch");
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.len() as f64;
        let s: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        self.push(Tensor::scalar(s / n), Op::Mse(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Backpropagates from a scalar.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.shape(root), [1, 1], "backward needs a scalar root");
        self.backward_with(root, Tensor::scalar(1.0));
    }

    /// Backpropagates an explicit upstream gradient for `root`.
    pub fn backward_with(&mut self, root: Var, seed: Tensor) {
        assert_eq!(self.shape(root), seed.shape(), "seed shape mismatch");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
    }

    fn acc(&mut self, v: Var, g: Tensor) {
        match &mut self.grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor) {
        // Gradients are computed against immutable node values, then accumulated.
        let mut out: Vec<(Var, Tensor)> = Vec::with_capacity(3);
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                out.push((*a, g.matmul_t(self.value(*b))));
                out.push((*b, self.value(*a).t_matmul(g)));
            }
            Op::MatMulT(a, b) => {
                out.push((*a, g.matmul(self.value(*b))));
                out.push((*b, g.t_matmul(self.value(*a))));
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::AddRow(a, b) => {
                let mut col = vec![0.0; g.cols()];
                for r in 0..g.rows() {
                    for (c, v) in col.iter_mut().zip(g.row(r)) {
                        *c += v;
                    }
                }
                out.push((*a, g.clone()));
                out.push((*b, Tensor::row_vector(col)));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = g.clone();
                ga.data_mut().iter_mut().zip(bv.data()).for_each(|(x, y)| *x *= y);
                let mut gb = g.clone();
                gb.data_mut().iter_mut().zip(av.data()).for_each(|(x, y)| *x *= y);
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::Scale(a, c) => out.push((*a, g.map(|v| v * c))),
            Op::Gelu(a) => {
                let mut ga = g.clone();
                for (gv, &x) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    *gv *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                }
                out.push((*a, ga));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let [m, n] = xhat.shape();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let mut dx = Tensor::zeros(m, n);
                for r in 0..m {
                    let gr = g.row(r);
                    let hr = xhat.row(r);
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    let dxhat: Vec<f64> = (0..n).map(|j| gr[j] * gam[j]).collect();
                    for j in 0..n {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        sum_d += dxhat[j];
                        sum_dh += dxhat[j] * hr[j];
                    }
                    let k = rstd[r] / n as f64;
                    for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = k * (n as f64 * dxhat[j] - sum_d - hr[j] * sum_dh);
                    }
                }
                out.push((*x, dx));
                out.push((*gamma, Tensor::row_vector(dgamma)));
                out.push((*beta, Tensor::row_vector(dbeta)));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (j, d) in ga.row_mut(r).iter_mut().enumerate() {
                        *d = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*a, ga));
            }
            Op::Dropout { x, mask } => {
                let mut gx = g.clone();
                gx.data_mut().iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
                out.push((*x, gx));
            }
            Op::SliceCols { x, start } => {
                let [m, n] = self.shape(*x);
                let mut gx = Tensor::zeros(m, n);
                for r in 0..m {
                    gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                out.push((*x, gx));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    let mut gp = Tensor::zeros(g.rows(), c);
                    for r in 0..g.rows() {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + c]);
                    }
                    off += c;
                    out.push((p, gp));
                }
            }
            Op::SliceRows { x, start } => {
                let [m, n] = self.shape(*x);
                let mut gx = Tensor::zeros(m, n);
                gx.data_mut()[start * n..(start + g.rows()) * n].copy_from_slice(g.data());
                out.push((*x, gx));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let [r, c] = self.shape(p);
                    let gp = Tensor::new(r, c, g.data()[off * c..(off + r) * c].to_vec()).expect("shape");
                    off += r;
                    out.push((p, gp));
                }
            }
            Op::Gather { table, idx } => {
                let [m, n] = self.shape(*table);
                let mut gt = Tensor::zeros(m, n);
                for (r, &i) in idx.iter().enumerate() {
                    for (t, v) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                        *t += v;
                    }
                }
                out.push((*table, gt));
            }
            Op::MeanRows(x) => {
                let [m, n] = self.shape(*x);
                let mut gx = Tensor::zeros(m, n);
                for r in 0..m {
                    for (t, v) in gx.row_mut(r).iter_mut().zip(g.row(0)) {
                        *t = v / m as f64;
                    }
                }
                out.push((*x, gx));
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (j, d) in gx.row_mut(r).iter_mut().enumerate() {
                        *d = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                out.push((*x, gx));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let count = targets.iter().flatten().count() as f64;
                let up = g.item() / count;
                let mut gl = Tensor::zeros(probs.rows(), probs.cols());
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let row = gl.row_mut(r);
                        row.copy_from_slice(probs.row(r));
                        row[t] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= up);
                    }
                }
                out.push((*logits, gl));
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = 2.0 * g.item() / av.len() as f64;
                let mut ga = av.clone();
                ga.data_mut().iter_mut().zip(bv.data()).for_each(|(x, y)| *x = k * (*x - y));
                out.push((*b, ga.map(|v| -v)));
                out.push((*a, ga));
            }
            Op::Sum(x) => {
                let [m, n] = self.shape(*x);
                out.push((*x, Tensor::full(m, n, g.item())));
            }
        }
        for (v, t) in out {
            self.acc(v, t);
        }
    }

    /// Gradient of the last backward root with respect to `v`, if it reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param_grads(&self) -> Grads {
        let mut out = Grads::new();
        for (i, pv) in self.param_vars.iter().enumerate() {
            if let Some(v) = pv {
                if let Some(g) = self.grad(*v) {
                    out.accumulate(ParamId(i), g);
                }
            }
        }
        out
    }
}

pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}
