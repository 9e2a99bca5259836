//! Reverse-mode gradient tape.
//!
//! Every primitive records its output value and the handles of its inputs.
//! [`Tape::backward`] walks the record from the loss node back to the first
//! entry, visiting each operation exactly once and accumulating adjoints into
//! its parents. Shape mismatches inside the tape are programming errors and
//! panic with the offending shapes.

use std::collections::HashMap;
use std::rc::Rc;

use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::{log_sum_exp, matmul_into, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;
const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Ln(Var, f64),
    Sqr(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    SumCols(Var),
    Gather(Var, Rc<[usize]>),
    GatherRows(Var, Rc<[usize]>),
    Reshape(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    L2NormalizeRows(Var),
    MulScalarVar(Var, Var),
    Recip(Var),
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one forward pass.
pub struct Tape<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

/// Adjoints of every recorded node, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s> Tape<'s> {
    /// A tape with no parameter store; only inputs and constants are available.
    pub fn new() -> Self {
        Self { store: None, nodes: Vec::new(), bound: HashMap::new() }
    }

    pub fn with_params(store: &'s ParamStore) -> Self {
        Self { store: Some(store), nodes: Vec::with_capacity(256), bound: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(value, op, needs)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.expect("parameter store").get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "expected a scalar, got {:?}", t.shape());
        t.data()[0]
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Differentiable leaf whose gradient can be read back from [`Gradients`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Leaf for a stored parameter. Repeated requests return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        assert!(self.store.is_some(), "tape has no parameter store");
        self.nodes.push(Node { value: None, op: Op::Param(id), needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    /// Routes every parameter of `layout` to a slice of the flat vector `theta`.
    /// Used by gradient checks that perturb all parameters at once.
    pub fn bind_flat(&mut self, layout: &ParamStore, theta: Var) {
        let mut off = 0;
        for id in layout.ids() {
            let t = layout.get(id);
            let n = t.len();
            let idx: Vec<usize> = (off..off + n).collect();
            let v = self.gather(theta, &idx, t.shape());
            self.bound.insert(id, v);
            off += n;
        }
        assert_eq!(off, self.value(theta).len(), "flat vector length mismatch");
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b)).unwrap_or_else(|e| panic!("{e}"));
        self.push_op(out, Op::MatMul(a, b), &[a, b])
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push_op(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push_op(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push_op(out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a length-`n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let ta = self.value(a);
        let (m, n) = ta.dims2();
        let tr = self.value(row);
        assert_eq!(tr.len(), n, "add_row width mismatch");
        let mut data = ta.data().to_vec();
        for i in 0..m {
            for (d, r) in data[i * n..(i + 1) * n].iter_mut().zip(tr.data()) {
                *d += r;
            }
        }
        let out = Tensor::new(ta.shape(), data).expect("shape");
        self.push_op(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push_op(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push_op(out, Op::AddScalar(a), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| {
            let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        self.push_op(out, Op::Gelu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push_op(out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push_op(out, Op::Sigmoid(a), &[a])
    }

    /// `ln(max(a, floor))`; the clamped region has zero gradient.
    pub fn ln(&mut self, a: Var, floor: f64) -> Var {
        let out = self.value(a).map(|x| x.max(floor).ln());
        self.push_op(out, Op::Ln(a, floor), &[a])
    }

    pub fn sqr(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push_op(out, Op::Sqr(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = super::tensor::softmax_rows(self.value(a)).unwrap_or_else(|e| panic!("{e}"));
        self.push_op(out, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.rank(), 2, "log_softmax_rows expects rank 2");
        let (m, n) = ta.dims2();
        let mut data = ta.data().to_vec();
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::new(ta.shape(), data).expect("shape");
        self.push_op(out, Op::LogSoftmaxRows(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push_op(Tensor::scalar(s), Op::MeanAll(a), &[a])
    }

    /// Mean over the row axis: `m x n -> 1 x n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = t.dims2();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(t.row_slice(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        self.push_op(Tensor::row(out), Op::MeanRows(a), &[a])
    }

    /// Sum over the column axis: `m x n -> m x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, _) = t.dims2();
        let out: Vec<f64> = (0..m).map(|i| t.row_slice(i).iter().sum()).collect();
        let out = Tensor::new(&[m, 1], out).expect("shape");
        self.push_op(out, Op::SumCols(a), &[a])
    }

    /// Picks flat elements of `a` by index and lays them out as `shape`.
    pub fn gather(&mut self, a: Var, idx: &[usize], shape: &[usize]) -> Var {
        let t = self.value(a);
        let data: Vec<f64> = idx.iter().map(|&i| t.data()[i]).collect();
        let out = Tensor::new(shape, data).unwrap_or_else(|e| panic!("{e}"));
        self.push_op(out, Op::Gather(a, idx.into()), &[a])
    }

    /// Picks whole rows of a rank-2 tensor.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let t = self.value(a);
        let (_, n) = t.dims2();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(t.row_slice(r));
        }
        let out = Tensor::new(&[rows.len(), n], data).unwrap_or_else(|e| panic!("{e}"));
        self.push_op(out, Op::GatherRows(a, rows.into()), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape).unwrap_or_else(|e| panic!("{e}"));
        self.push_op(out, Op::Reshape(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push_op(out, Op::Transpose(a), &[a])
    }

    /// Stacks rank-2 blocks with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).dims2().1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let t = self.value(p);
            let (pm, pn) = t.dims2();
            assert_eq!(pn, n, "concat_rows width mismatch");
            data.extend_from_slice(t.data());
            m += pm;
        }
        let out = Tensor::new(&[m, n], data).expect("shape");
        self.push_op(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Joins rank-2 blocks with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pm, pn) = self.value(p).dims2();
                assert_eq!(pm, m, "concat_cols height mismatch");
                pn
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            for i in 0..m {
                data[i * total + off..i * total + off + w].copy_from_slice(t.row_slice(i));
            }
            off += w;
        }
        let out = Tensor::new(&[m, total], data).expect("shape");
        self.push_op(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Divides each row by its L2 norm (floored at 1e-12).
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = t.dims2();
        let mut data = t.data().to_vec();
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let nr = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            row.iter_mut().for_each(|v| *v /= nr);
        }
        let out = Tensor::new(t.shape(), data).expect("shape");
        self.push_op(out, Op::L2NormalizeRows(a), &[a])
    }

    /// Multiplies every element of `a` by the one-element tensor `s`.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let out = self.value(a).map(|v| v * sv);
        self.push_op(out, Op::MulScalarVar(a, s), &[a, s])
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| 1.0 / v);
        self.push_op(out, Op::Recip(a), &[a])
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    /// Gradients of the bound store parameters.
    pub fn param_grads(&self, grads: &Gradients, store_len: usize) -> ParamGrads {
        let mut out: Vec<Option<Vec<f64>>> = vec![None; store_len];
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &grads.grads[idx] {
                    out[id.0] = Some(g.clone());
                }
            }
        }
        ParamGrads { grads: out }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.nodes[idx].value.as_ref();
        match &self.nodes[idx].op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2();
                let (_, n) = tb.dims2();
                if let Some(ga) = self.acc(grads, *a) {
                    // ga[m x k] += g[m x n] * b^T
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &tb.data()[p * n..(p + 1) * n];
                            ga[i * k + p] += gi.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // gb[k x n] += a^T * g
                    let at = ta.transpose();
                    matmul_into(at.data(), g, gb, k, m, n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * tb[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * ta[i];
                    }
                }
            }
            Op::AddRow(a, r) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gr) = self.acc(grads, *r) {
                    let n = gr.len();
                    for (i, gv) in g.iter().enumerate() {
                        gr[i % n] += gv;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Gelu(a) => {
                let ta = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        let x = ta[i];
                        let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
                        let th = u.tanh();
                        let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
                        let d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
                        ga[i] += g[i] * d;
                    }
                }
            }
            Op::Tanh(a) => {
                let y = out.expect("value").data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = out.expect("value").data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Ln(a, floor) => {
                let ta = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        if ta[i] > *floor {
                            ga[i] += g[i] / ta[i];
                        }
                    }
                }
            }
            Op::Sqr(a) => {
                let ta = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += 2.0 * ta[i] * g[i];
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let y = out.expect("value");
                let (m, n) = y.dims2();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..m {
                        let yr = y.row_slice(i);
                        let gr = &g[i * n..(i + 1) * n];
                        let s: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            ga[i * n + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let y = out.expect("value");
                let (m, n) = y.dims2();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..m {
                        let yr = y.row_slice(i);
                        let gr = &g[i * n..(i + 1) * n];
                        let s: f64 = gr.iter().sum();
                        for j in 0..n {
                            ga[i * n + j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::MeanAll(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::MeanRows(a) => {
                let (m, n) = self.value(*a).dims2();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j] / m as f64;
                        }
                    }
                }
            }
            Op::SumCols(a) => {
                let (m, n) = self.value(*a).dims2();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[i];
                        }
                    }
                }
            }
            Op::Gather(a, idx) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (t, &i) in idx.iter().enumerate() {
                        ga[i] += g[t];
                    }
                }
            }
            Op::GatherRows(a, rows) => {
                let (_, n) = self.value(*a).dims2();
                if let Some(ga) = self.acc(grads, *a) {
                    for (t, &r) in rows.iter().enumerate() {
                        let dst = &mut ga[r * n..(r + 1) * n];
                        for (d, s) in dst.iter_mut().zip(&g[t * n..(t + 1) * n]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        gp.iter_mut().zip(&g[off..off + len]).for_each(|(x, y)| *x += y);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = out.expect("value").dims2();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).dims2().1;
                    if let Some(gp) = self.acc(grads, p) {
                        for i in 0..m {
                            for j in 0..w {
                                gp[i * w + j] += g[i * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::L2NormalizeRows(a) => {
                let ta = self.value(*a);
                let y = out.expect("value");
                let (m, n) = ta.dims2();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..m {
                        let xr = ta.row_slice(i);
                        let nr = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let gr = &g[i * n..(i + 1) * n];
                        if nr <= NORM_FLOOR {
                            for j in 0..n {
                                ga[i * n + j] += gr[j] / NORM_FLOOR;
                            }
                            continue;
                        }
                        let yr = y.row_slice(i);
                        let yg: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            ga[i * n + j] += (gr[j] - yr[j] * yg) / nr;
                        }
                    }
                }
            }
            Op::MulScalarVar(a, s) => {
                let sv = self.scalar(*s);
                let ta = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += sv * y);
                }
                if let Some(gs) = self.acc(grads, *s) {
                    gs[0] += ta.iter().zip(g).map(|(x, y)| x * y).sum::<f64>();
                }
            }
            Op::Recip(a) => {
                let ta = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] -= g[i] / (ta[i] * ta[i]);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_identity() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::row(vec![1.0, -2.0, 3.0]));
        let sq = tape.sqr(x);
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        let g = tape.backward(half);
        assert_eq!(g.wrt(x).unwrap(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::row(vec![1.0, 2.0]));
        let x = tape.input(Tensor::row(vec![3.0, 4.0]));
        let y = tape.mul(c, x);
        let s = tape.sum(y);
        let g = tape.backward(s);
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(vec![2.0]));
        let mut tape = Tape::with_params(&store);
        let w1 = tape.param(id);
        let w2 = tape.param(id);
        assert_eq!(w1, w2);
        let y = tape.mul(w1, w2);
        let s = tape.sum(y);
        let g = tape.backward(s);
        let pg = tape.param_grads(&g, store.len());
        assert_eq!(pg.get(id).unwrap(), &[4.0]);
    }
}
