//! Reverse-mode differentiation over a fixed set of matrix primitives.
//!
//! A [`Tape`] records every operation eagerly: values are computed when a node
//! is pushed, and [`Tape::backward`] walks the nodes in reverse insertion order,
//! which is a reverse topological order because inputs always precede outputs.

use super::matrix::{dot, log_sum_exp, softmax_in_place, Matrix};
use crate::error::{bail, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;
const LOG_FLOOR: f64 = 1e-300;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// Tanh approximation of GELU.
    Gelu,
    Tanh,
    /// Natural log, with inputs floored at 1e-300.
    Log,
    Exp,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let inner = GELU_C * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + inner.tanh())
            }
            Activation::Tanh => x.tanh(),
            Activation::Log => x.max(LOG_FLOOR).ln(),
            Activation::Exp => x.exp(),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let inner = GELU_C * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Log => {
                if x < LOG_FLOOR {
                    0.0
                } else {
                    1.0 / x
                }
            }
            Activation::Exp => y,
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNT(Var, Var),
    /// `aᵀ · b`
    MatMulTN(Var, Var),
    Transpose(Var),
    /// Same shape, or `b` a single row broadcast over `a`'s rows.
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Multiply by a 1x1 node.
    ScaleBy(Var, Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    Reshape(Var),
    Map(Var, Activation),
    LayerNormRows(Var),
    L2NormalizeRows(Var),
    Sum(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
    trainable: bool,
}

/// Recorded computation graph.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of the trainable leaves after [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for a trainable leaf. Constants and intermediate nodes yield `None`.
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Matrix> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    pub fn scalar_value(&self, var: Var) -> f64 {
        self.nodes[var.0].value.get(0, 0)
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            trainable: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn param(&mut self, value: Matrix) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].trainable = true;
        v
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Matrix, trainable: bool) -> Var {
        if trainable {
            self.param(value)
        } else {
            self.constant(value)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMulNT(a, b), rg))
    }

    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_tn(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMulTN(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let value = if va.shape() == vb.shape() {
            va.add(vb)?
        } else if vb.rows() == 1 && vb.cols() == va.cols() {
            let mut out = va.clone();
            for r in 0..out.rows() {
                for (o, x) in out.row_mut(r).iter_mut().zip(vb.as_slice()) {
                    *o += x;
                }
            }
            out
        } else {
            bail!(
                Dimension,
                "add of {}x{} and {}x{}",
                va.rows(),
                va.cols(),
                vb.rows(),
                vb.cols()
            );
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).shape() != (1, 1) {
            bail!(Dimension, "scale_by expects a 1x1 factor");
        }
        let value = self.value(a).scale(self.scalar_value(s));
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(value, Op::ScaleBy(a, s), rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).softmax_rows()?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SoftmaxRows(a), rg))
    }

    /// Softmax down each column, i.e. over the row axis.
    pub fn softmax_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.transpose(a);
        let s = self.softmax_rows(t)?;
        Ok(self.transpose(s))
    }

    pub fn log_sum_exp_rows(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).log_sum_exp_rows()?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::LogSumExpRows(a), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_rows(&mats)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(a).select_rows(indices)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SelectRows(a, indices.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(a).reshape(rows, cols)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn map(&mut self, a: Var, act: Activation) -> Var {
        let value = self.value(a).map(|x| act.apply(x));
        let rg = self.rg(a);
        self.push(value, Op::Map(a, act), rg)
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = src.clone();
        let n = src.cols() as f64;
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
        let rg = self.rg(a);
        self.push(value, Op::LayerNormRows(a), rg)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = src.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let norm = dot(row, row).sqrt().max(NORM_FLOOR);
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let rg = self.rg(a);
        self.push(value, Op::L2NormalizeRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// Propagates adjoints from a scalar `loss` back to every trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            let (r, c) = self.value(loss).shape();
            bail!(Contract, "backward requires a scalar loss, got {}x{}", r, c);
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(node, &g, &mut adj)?;
        }

        let grads = adj
            .into_iter()
            .enumerate()
            .map(|(i, g)| if self.nodes[i].trainable { g } else { None })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Matrix, adj: &mut [Option<Matrix>]) -> Result<()> {
        let acc = |v: Var, delta: Matrix, adj: &mut [Option<Matrix>]| -> Result<()> {
            if !self.rg(v) {
                return Ok(());
            }
            match &mut adj[v.0] {
                Some(existing) => existing.add_assign(&delta)?,
                slot @ None => *slot = Some(delta),
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.matmul_nt(self.value(*b))?, adj)?;
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).matmul_tn(g)?, adj)?;
                }
            }
            Op::MatMulNT(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                if self.rg(*a) {
                    acc(*a, g.matmul(self.value(*b))?, adj)?;
                }
                if self.rg(*b) {
                    acc(*b, g.matmul_tn(self.value(*a))?, adj)?;
                }
            }
            Op::MatMulTN(a, b) => {
                // y = aᵀ b: da = b gᵀ, db = a g
                if self.rg(*a) {
                    acc(*a, self.value(*b).matmul_nt(g)?, adj)?;
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).matmul(g)?, adj)?;
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose(), adj)?,
            Op::Add(a, b) => {
                acc(*a, g.clone(), adj)?;
                if self.rg(*b) {
                    let vb = self.value(*b);
                    if vb.shape() == g.shape() {
                        acc(*b, g.clone(), adj)?;
                    } else {
                        let mut col_sum = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, x) in col_sum.as_mut_slice().iter_mut().zip(g.row(r)) {
                                *o += x;
                            }
                        }
                        acc(*b, col_sum, adj)?;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.hadamard(self.value(*b))?, adj)?;
                }
                if self.rg(*b) {
                    acc(*b, g.hadamard(self.value(*a))?, adj)?;
                }
            }
            Op::Scale(a, f) => acc(*a, g.scale(*f), adj)?,
            Op::ScaleBy(a, s) => {
                let factor = self.scalar_value(*s);
                if self.rg(*a) {
                    acc(*a, g.scale(factor), adj)?;
                }
                if self.rg(*s) {
                    let d = dot(g.as_slice(), self.value(*a).as_slice());
                    acc(*s, Matrix::scalar(d), adj)?;
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = dot(yr, gr);
                    for (o, (yv, gv)) in d.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yv * (gv - inner);
                    }
                }
                acc(*a, d, adj)?;
            }
            Op::LogSumExpRows(a) => {
                let mut d = self.value(*a).clone();
                for r in 0..d.rows() {
                    let gr = g.get(r, 0);
                    let row = d.row_mut(r);
                    softmax_in_place(row);
                    row.iter_mut().for_each(|v| *v *= gr);
                }
                acc(*a, d, adj)?;
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    if self.rg(*p) {
                        let idx: Vec<usize> = (start..start + rows).collect();
                        acc(*p, g.select_rows(&idx)?, adj)?;
                    }
                    start += rows;
                }
            }
            Op::SelectRows(a, indices) => {
                let src = self.value(*a);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                for (k, &i) in indices.iter().enumerate() {
                    for (o, x) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += x;
                    }
                }
                acc(*a, d, adj)?;
            }
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, g.reshape(r, c)?, adj)?;
            }
            Op::Map(a, act) => {
                let x = self.value(*a);
                let y = &node.value;
                let d = Matrix::from_vec(
                    x.rows(),
                    x.cols(),
                    x.as_slice()
                        .iter()
                        .zip(y.as_slice())
                        .zip(g.as_slice())
                        .map(|((&xv, &yv), &gv)| gv * act.derivative(xv, yv))
                        .collect(),
                )?;
                acc(*a, d, adj)?;
            }
            Op::LayerNormRows(a) => {
                let x = self.value(*a);
                let y = &node.value;
                let n = x.cols() as f64;
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let mean = xr.iter().sum::<f64>() / n;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let (yr, gr) = (y.row(r), g.row(r));
                    let g_mean = gr.iter().sum::<f64>() / n;
                    let gy_mean = dot(gr, yr) / n;
                    for (o, (yv, gv)) in d.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = inv * (gv - g_mean - yv * gy_mean);
                    }
                }
                acc(*a, d, adj)?;
            }
            Op::L2NormalizeRows(a) => {
                let x = self.value(*a);
                let y = &node.value;
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let norm = dot(xr, xr).sqrt().max(NORM_FLOOR);
                    let (yr, gr) = (y.row(r), g.row(r));
                    let proj = dot(yr, gr);
                    for (o, (yv, gv)) in d.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = (gv - yv * proj) / norm;
                    }
                }
                acc(*a, d, adj)?;
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Matrix::filled(r, c, g.get(0, 0)), adj)?;
            }
        }
        Ok(())
    }
}

/// Cross-entropy of each row of `logits` against its target column, averaged over rows.
pub fn cross_entropy_mean(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let (rows, cols) = tape.value(logits).shape();
    if targets.len() != rows {
        bail!(
            Dimension,
            "{} targets for {} rows of logits",
            targets.len(),
            rows
        );
    }
    let mut onehot = Matrix::zeros(rows, cols);
    for (r, &t) in targets.iter().enumerate() {
        if t >= cols {
            bail!(Contract, "target {} out of range for {} classes", t, cols);
        }
        onehot.set(r, t, 1.0);
    }
    let lse = tape.log_sum_exp_rows(logits)?;
    let lse_total = tape.sum(lse);
    let mask = tape.constant(onehot);
    let picked = tape.mul(logits, mask)?;
    let picked_total = tape.sum(picked);
    let diff = tape.sub(lse_total, picked_total)?;
    Ok(tape.scale(diff, 1.0 / rows as f64))
}

/// Scalar cross-entropy on plain values.
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    log_sum_exp(logits) - logits[target]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let p = t.param(Matrix::from_rows(&[[1.0, -2.0], [3.0, 0.5]]).unwrap());
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap(), &Matrix::filled(2, 2, 1.0));
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut t = Tape::new();
        let value = Matrix::from_rows(&[[1.0, -2.0, 0.25]]).unwrap();
        let p = t.param(value.clone());
        let sq = t.mul(p, p).unwrap();
        let s = t.sum(sq);
        let half = t.scale(s, 0.5);
        let g = t.backward(half).unwrap();
        assert_eq!(g.get(p).unwrap(), &value);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Matrix::filled(1, 3, 2.0));
        let p = t.param(Matrix::filled(1, 3, 1.0));
        let m = t.mul(c, p).unwrap();
        let s = t.sum(m);
        let g = t.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(m).is_none());
        assert_eq!(g.get(p).unwrap().as_slice(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut t = Tape::new();
        let p = t.param(Matrix::zeros(2, 2));
        assert!(matches!(t.backward(p), Err(crate::HopeError::Contract(_))));
    }

    #[test]
    fn broadcast_add_sums_bias_gradient() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::zeros(3, 2));
        let b = t.param(Matrix::zeros(1, 2));
        let y = t.add(x, b).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap().as_slice(), &[3.0, 3.0]);
    }

    #[test]
    fn cross_entropy_values() {
        assert!((cross_entropy(&[1.0, 0.0], 0) - 0.313_261_687_518_222_8).abs() < 1e-12);
        let mut t = Tape::new();
        let logits = t.constant(Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0]]).unwrap());
        let l = cross_entropy_mean(&mut t, logits, &[0, 0]).unwrap();
        let want = (2f64.ln() + 0.313_261_687_518_222_8) / 2.0;
        assert!((t.scalar_value(l) - want).abs() < 1e-12);
    }
}
