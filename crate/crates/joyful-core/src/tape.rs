//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records tensor-granularity operations in execution order; every
//! node's inputs precede it, so a single reverse sweep from a scalar loss
//! accumulates gradients into every `requires_grad` ancestor exactly once.
//! Tapes are rebuilt per forward pass and never shared across threads.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    /// Elementwise product with a constant tensor (feature masks, fixed mixing
    /// matrices). No gradient flows into the constant.
    MulMask(Var, Tensor),
    /// Broadcast-add a 1xn bias row to every row of an mxn matrix.
    AddRow(Var, Var),
    Relu(Var),
    Tanh(Var),
    RowSoftmax(Var),
    /// Per-row log-sum-exp, mxn -> mx1.
    RowLse(Var),
    /// Main diagonal of a square matrix, mxm -> mx1.
    Diag(Var),
    /// Per-row L2 normalization; zero rows map to zero rows.
    RowNormalize(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    ConcatCols(Vec<Var>),
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    MeanAbsError {
        pred: Var,
        targets: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a constant input; no gradient is tracked for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Record a trainable input; `backward` will populate its gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn clear_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_from(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, requires_grad, op)
    }

    // ------------------------------------------------------------------
    // Operations
    // ------------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push_from(value, &[a, b], Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push_from(value, &[a], Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push_from(value, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push_from(value, &[a, b], Op::Sub(a, b)))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push_from(value, &[a, b], Op::Hadamard(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push_from(value, &[a], Op::Scale(a, c))
    }

    pub fn mul_mask(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        let value = self.value(a).hadamard(&mask)?;
        Ok(self.push_from(value, &[a], Op::MulMask(a, mask)))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(Error::dims("add_row", &av.shape(), &bv.shape()));
        }
        let mut value = av.clone();
        for i in 0..value.rows() {
            for j in 0..value.cols() {
                let x = value.get(i, j) + bv.get(0, j);
                value.set(i, j, x);
            }
        }
        Ok(self.push_from(value, &[a, bias], Op::AddRow(a, bias)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push_from(value, &[a], Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push_from(value, &[a], Op::Tanh(a))
    }

    /// Row-wise softmax with max subtraction for stability. Each output row
    /// is nonnegative and sums to 1 (within 1e-12 in double precision).
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let value = row_softmax_value(self.value(a));
        self.push_from(value, &[a], Op::RowSoftmax(a))
    }

    pub fn row_lse(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = Tensor::zeros(x.rows(), 1);
        for i in 0..x.rows() {
            value.set(i, 0, log_sum_exp(x.row_slice(i)));
        }
        self.push_from(value, &[a], Op::RowLse(a))
    }

    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rows() != x.cols() {
            return Err(Error::dims("diag", &x.shape(), &x.shape()));
        }
        let mut value = Tensor::zeros(x.rows(), 1);
        for i in 0..x.rows() {
            value.set(i, 0, x.get(i, i));
        }
        Ok(self.push_from(value, &[a], Op::Diag(a)))
    }

    /// L2-normalize each row; zero rows stay zero (the cosine zero-norm rule).
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for i in 0..x.rows() {
            let n = x.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                for j in 0..x.cols() {
                    value.set(i, j, x.get(i, j) / n);
                }
            }
        }
        self.push_from(value, &[a], Op::RowNormalize(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        if gv.rows() != 1 || gv.cols() != xv.cols() {
            return Err(Error::dims("layer_norm gamma", &xv.shape(), &gv.shape()));
        }
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::dims("layer_norm beta", &xv.shape(), &bv.shape()));
        }
        let (m, n) = (xv.rows(), xv.cols());
        let mut value = Tensor::zeros(m, n);
        for i in 0..m {
            let row = xv.row_slice(i);
            let (mean, inv_std) = row_moments(row, eps);
            for j in 0..n {
                let xhat = (row[j] - mean) * inv_std;
                value.set(i, j, gv.get(0, j) * xhat + bv.get(0, j));
            }
        }
        Ok(self.push_from(value, &[x, gamma, beta], Op::LayerNorm { x, gamma, beta, eps }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols of zero tensors"));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::dims(
                    "concat_cols",
                    &self.value(parts[0]).shape(),
                    &t.shape(),
                ));
            }
            cols += t.cols();
        }
        let mut value = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            for i in 0..rows {
                for j in 0..t.cols() {
                    value.set(i, offset + j, t.get(i, j));
                }
            }
            offset += t.cols();
        }
        let op = Op::ConcatCols(parts.to_vec());
        Ok(self.push_from(value, parts, op))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push_from(value, &[a], Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean squared-L2 distance over rows: (1/m) * sum_ij (a-b)_ij^2.
    pub fn mean_row_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = self.value(a).rows() as f64;
        let d = self.sub(a, b)?;
        let sq = self.hadamard(d, d)?;
        let s = self.sum_all(sq);
        Ok(self.scale(s, 1.0 / m))
    }

    /// Mean negative log-likelihood of the true classes under row-softmax,
    /// in stable log-sum-exp form.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if labels.len() != lv.rows() {
            return Err(Error::contract(format!(
                "cross_entropy: {} labels for {} rows",
                labels.len(),
                lv.rows()
            )));
        }
        let k = lv.cols();
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::contract(format!(
                "cross_entropy: label {bad} out of range for {k} classes"
            )));
        }
        let m = lv.rows();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = lv.row_slice(i);
            total += log_sum_exp(row) - row[y];
        }
        let value = Tensor::scalar(total / m as f64);
        Ok(self.push_from(
            value,
            &[logits],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Mean absolute error of an mx1 prediction column against fixed targets.
    pub fn mean_abs_error(&mut self, pred: Var, targets: &[f64]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.cols() != 1 || pv.rows() != targets.len() {
            return Err(Error::dims("mean_abs_error", &pv.shape(), &[targets.len(), 1]));
        }
        let m = targets.len() as f64;
        let total: f64 = pv
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &t)| (p - t).abs())
            .sum();
        let value = Tensor::scalar(total / m);
        Ok(self.push_from(
            value,
            &[pred],
            Op::MeanAbsError {
                pred,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Affine layer: x*w + bias broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, bias)
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients accumulate into every
    /// `requires_grad` ancestor; previous gradients are cleared first, so two
    /// sweeps over the same tape produce identical results.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.clear_grads();
        self.grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(out_grad) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &out_grad)?;
            self.grads[idx] = Some(out_grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (gi, di) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gi += di;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, idx: usize, dy: &Tensor) -> Result<()> {
        // Matching on an owned clone keeps reads (value) and writes
        // (accumulate) on `self` from overlapping.
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => Ok(()),
            Op::MatMul(a, b) => {
                let da = dy.matmul(&self.value(b).transpose())?;
                let db = self.value(a).transpose().matmul(dy)?;
                self.accumulate(a, da);
                self.accumulate(b, db);
                Ok(())
            }
            Op::Transpose(a) => {
                self.accumulate(a, dy.transpose());
                Ok(())
            }
            Op::Add(a, b) => {
                self.accumulate(a, dy.clone());
                self.accumulate(b, dy.clone());
                Ok(())
            }
            Op::Sub(a, b) => {
                self.accumulate(a, dy.clone());
                self.accumulate(b, dy.scale(-1.0));
                Ok(())
            }
            Op::Hadamard(a, b) => {
                let da = dy.hadamard(self.value(b))?;
                let db = dy.hadamard(self.value(a))?;
                self.accumulate(a, da);
                self.accumulate(b, db);
                Ok(())
            }
            Op::Scale(a, c) => {
                self.accumulate(a, dy.scale(c));
                Ok(())
            }
            Op::MulMask(a, mask) => {
                let da = dy.hadamard(&mask)?;
                self.accumulate(a, da);
                Ok(())
            }
            Op::AddRow(a, bias) => {
                self.accumulate(a, dy.clone());
                self.accumulate(bias, dy.col_sums());
                Ok(())
            }
            Op::Relu(a) => {
                let da = dy.zip_map(self.value(a), |g, x| if x > 0.0 { g } else { 0.0 })?;
                self.accumulate(a, da);
                Ok(())
            }
            Op::Tanh(a) => {
                let y = &self.nodes[idx].value;
                let da = dy.zip_map(y, |g, t| g * (1.0 - t * t))?;
                self.accumulate(a, da);
                Ok(())
            }
            Op::RowSoftmax(a) => {
                let y = &self.nodes[idx].value;
                let (m, n) = (y.rows(), y.cols());
                let mut da = Tensor::zeros(m, n);
                for i in 0..m {
                    let yrow = y.row_slice(i);
                    let grow = dy.row_slice(i);
                    let inner: f64 = yrow.iter().zip(grow).map(|(&yi, &gi)| yi * gi).sum();
                    for j in 0..n {
                        da.set(i, j, yrow[j] * (grow[j] - inner));
                    }
                }
                self.accumulate(a, da);
                Ok(())
            }
            Op::RowLse(a) => {
                let x = self.value(a);
                let (m, n) = (x.rows(), x.cols());
                let mut da = Tensor::zeros(m, n);
                for i in 0..m {
                    let soft = softmax_slice(x.row_slice(i));
                    let g = dy.get(i, 0);
                    for j in 0..n {
                        da.set(i, j, g * soft[j]);
                    }
                }
                self.accumulate(a, da);
                Ok(())
            }
            Op::Diag(a) => {
                let m = self.value(a).rows();
                let mut da = Tensor::zeros(m, m);
                for i in 0..m {
                    da.set(i, i, dy.get(i, 0));
                }
                self.accumulate(a, da);
                Ok(())
            }
            Op::RowNormalize(a) => {
                let x = self.value(a);
                let y = &self.nodes[idx].value;
                let (m, n) = (x.rows(), x.cols());
                let mut da = Tensor::zeros(m, n);
                for i in 0..m {
                    let norm = x.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let yrow = y.row_slice(i);
                    let grow = dy.row_slice(i);
                    let inner: f64 = yrow.iter().zip(grow).map(|(&yi, &gi)| yi * gi).sum();
                    for j in 0..n {
                        da.set(i, j, (grow[j] - yrow[j] * inner) / norm);
                    }
                }
                self.accumulate(a, da);
                Ok(())
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.value(x);
                let gv = self.value(gamma);
                let (m, n) = (xv.rows(), xv.cols());
                let mut dx = Tensor::zeros(m, n);
                let mut dgamma = Tensor::zeros(1, n);
                let mut dbeta = Tensor::zeros(1, n);
                for i in 0..m {
                    let row = xv.row_slice(i);
                    let (mean, inv_std) = row_moments(row, eps);
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                    let grow = dy.row_slice(i);
                    let dxhat: Vec<f64> = (0..n).map(|j| grow[j] * gv.get(0, j)).collect();
                    let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dxhat_xhat: f64 =
                        dxhat.iter().zip(&xhat).map(|(&d, &h)| d * h).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dx.set(
                            i,
                            j,
                            inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat),
                        );
                        let dg = dgamma.get(0, j) + grow[j] * xhat[j];
                        dgamma.set(0, j, dg);
                        let db = dbeta.get(0, j) + grow[j];
                        dbeta.set(0, j, db);
                    }
                }
                self.accumulate(x, dx);
                self.accumulate(gamma, dgamma);
                self.accumulate(beta, dbeta);
                Ok(())
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let t_cols = self.value(p).cols();
                    let rows = self.value(p).rows();
                    let mut dp = Tensor::zeros(rows, t_cols);
                    for i in 0..rows {
                        for j in 0..t_cols {
                            dp.set(i, j, dy.get(i, offset + j));
                        }
                    }
                    offset += t_cols;
                    self.accumulate(p, dp);
                }
                Ok(())
            }
            Op::SumAll(a) => {
                let u = dy.item();
                let shape = self.value(a).shape();
                let da = Tensor::from_vec(shape[0], shape[1], vec![u; shape[0] * shape[1]])?;
                self.accumulate(a, da);
                Ok(())
            }
            Op::CrossEntropy { logits, labels } => {
                let u = dy.item();
                let lv = self.value(logits);
                let (m, k) = (lv.rows(), lv.cols());
                let mut da = Tensor::zeros(m, k);
                for (i, &y) in labels.iter().enumerate() {
                    let soft = softmax_slice(lv.row_slice(i));
                    for j in 0..k {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        da.set(i, j, u * (soft[j] - onehot) / m as f64);
                    }
                }
                self.accumulate(logits, da);
                Ok(())
            }
            Op::MeanAbsError { pred, targets } => {
                let u = dy.item();
                let m = targets.len() as f64;
                let pv = self.value(pred);
                let mut da = Tensor::zeros(pv.rows(), 1);
                for (i, &t) in targets.iter().enumerate() {
                    let r = pv.get(i, 0) - t;
                    da.set(i, 0, u * sign(r) / m);
                }
                self.accumulate(pred, da);
                Ok(())
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

fn softmax_slice(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn row_softmax_value(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let soft = softmax_slice(x.row_slice(i));
        for (j, s) in soft.into_iter().enumerate() {
            out.set(i, j, s);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    /// Central finite-difference oracle: rebuilds the whole graph per probe
    /// and compares every analytic partial, rel err <= 1e-4 with h = 1e-5.
    fn fd_check<F>(shapes: &[(usize, usize)], seed: u64, build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|&(r, c)| rand_tensor(&mut rng, r, c))
            .collect();

        let eval = |tensors: &[Tensor]| -> (f64, Vec<Option<Tensor>>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = tensors.iter().map(|t| tape.param(t.clone())).collect();
            let loss = build(&mut tape, &vars);
            tape.backward(loss).unwrap();
            let grads = vars.iter().map(|&v| tape.grad(v).cloned()).collect();
            (tape.value(loss).item(), grads)
        };

        let (_, grads) = eval(&inputs);
        let h = 1e-5;
        for (ti, tensor) in inputs.iter().enumerate() {
            let analytic = grads[ti].as_ref().expect("param must receive a gradient");
            for k in 0..tensor.len() {
                let mut plus = inputs.clone();
                plus[ti].data_mut()[k] += h;
                let mut minus = inputs.clone();
                minus[ti].data_mut()[k] -= h;
                let f_plus = {
                    let mut tape = Tape::new();
                    let vars: Vec<Var> = plus.iter().map(|t| tape.param(t.clone())).collect();
                    let loss = build(&mut tape, &vars);
                    tape.value(loss).item()
                };
                let f_minus = {
                    let mut tape = Tape::new();
                    let vars: Vec<Var> = minus.iter().map(|t| tape.param(t.clone())).collect();
                    let loss = build(&mut tape, &vars);
                    tape.value(loss).item()
                };
                let fd = (f_plus - f_minus) / (2.0 * h);
                let a = analytic.data()[k];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(
                    rel <= 1e-4,
                    "input {ti} coord {k}: analytic {a} vs fd {fd} (rel {rel})"
                );
            }
        }
    }

    #[test]
    fn matmul_backward_matches_fd() {
        fd_check(&[(3, 4), (4, 2)], 11, |tape, vars| {
            let c = tape.matmul(vars[0], vars[1]).unwrap();
            let sq = tape.hadamard(c, c).unwrap();
            tape.sum_all(sq)
        });
    }

    #[test]
    fn elementwise_and_bias_backward_match_fd() {
        fd_check(&[(3, 4), (3, 4), (1, 4)], 12, |tape, vars| {
            let s = tape.sub(vars[0], vars[1]).unwrap();
            let p = tape.hadamard(s, vars[0]).unwrap();
            let b = tape.add_row(p, vars[2]).unwrap();
            let t = tape.tanh(b);
            tape.sum_all(t)
        });
    }

    #[test]
    fn softmax_lse_diag_backward_match_fd() {
        fd_check(&[(4, 4)], 13, |tape, vars| {
            let s = tape.row_softmax(vars[0]);
            let l = tape.row_lse(s);
            let sq = tape.hadamard(l, l).unwrap();
            let d = tape.diag(vars[0]).unwrap();
            let sum_d = tape.sum_all(d);
            let sum_sq = tape.sum_all(sq);
            tape.add(sum_sq, sum_d).unwrap()
        });
    }

    #[test]
    fn normalize_and_layer_norm_backward_match_fd() {
        fd_check(&[(3, 5), (1, 5), (1, 5)], 14, |tape, vars| {
            let n = tape.row_normalize(vars[0]);
            let ln = tape.layer_norm(n, vars[1], vars[2], 1e-5).unwrap();
            let sq = tape.hadamard(ln, ln).unwrap();
            tape.sum_all(sq)
        });
    }

    #[test]
    fn concat_transpose_backward_match_fd() {
        fd_check(&[(2, 3), (2, 2)], 15, |tape, vars| {
            let c = tape.concat_cols(&[vars[0], vars[1]]).unwrap();
            let ct = tape.transpose(c);
            let g = tape.matmul(c, ct).unwrap();
            tape.sum_all(g)
        });
    }

    #[test]
    fn cross_entropy_backward_matches_fd() {
        fd_check(&[(4, 3)], 16, |tape, vars| {
            tape.cross_entropy(vars[0], &[0, 2, 1, 2]).unwrap()
        });
    }

    #[test]
    fn mae_backward_matches_fd() {
        fd_check(&[(5, 1)], 17, |tape, vars| {
            tape.mean_abs_error(vars[0], &[0.4, -1.0, 2.5, 0.0, -0.3])
                .unwrap()
        });
    }

    #[test]
    fn relu_scale_mask_backward_match_fd() {
        // Inputs bounded away from the ReLU kink so the FD probe stays valid.
        let mask = Tensor::from_vec(2, 3, vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        fd_check(&[(2, 3)], 18, |tape, vars| {
            let shifted = tape.scale(vars[0], 3.0);
            let r = tape.relu(shifted);
            let masked = tape.mul_mask(r, mask.clone()).unwrap();
            tape.sum_all(masked)
        });
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(2, 2));
        let err = tape.backward(a).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(&[1.0, 2.0]));
        let sq = tape.hadamard(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn cosine_of_self_has_vanishing_gradient() {
        // cos(u, u) == 1 identically, so its gradient must be ~0.
        let mut tape = Tape::new();
        let u = tape.param(Tensor::row(&[0.5, -1.0, 2.0]));
        let n = tape.row_normalize(u);
        let nt = tape.transpose(n);
        let c = tape.matmul(n, nt).unwrap();
        let loss = tape.sum_all(c);
        tape.backward(loss).unwrap();
        for &g in tape.grad(u).unwrap().data() {
            assert!(g.abs() < 1e-12, "gradient component {g} should vanish");
        }
    }

    #[test]
    fn row_softmax_rows_sum_to_one_and_shift_invariant() {
        let x = Tensor::from_vec(
            2,
            3,
            vec![0.0, 0.0, 0.0, 1f64.ln(), 2f64.ln(), 3f64.ln()],
        )
        .unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let s = tape.row_softmax(v);
        let sv = tape.value(s);
        for j in 0..3 {
            assert!((sv.get(0, j) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((sv.get(1, 0) - 1.0 / 6.0).abs() < 1e-12);
        assert!((sv.get(1, 1) - 2.0 / 6.0).abs() < 1e-12);
        assert!((sv.get(1, 2) - 3.0 / 6.0).abs() < 1e-12);
        for i in 0..2 {
            let sum: f64 = sv.row_slice(i).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }

        let shifted = x.map(|v| v + 41.5);
        let mut tape2 = Tape::new();
        let v2 = tape2.leaf(shifted);
        let s2 = tape2.row_softmax(v2);
        for (a, b) in tape.value(s).data().iter().zip(tape2.value(s2).data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn repeated_backward_is_deterministic() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::from_vec(2, 2, vec![0.3, -1.0, 0.7, 2.0]).unwrap());
        let b = tape.param(Tensor::from_vec(2, 2, vec![1.5, 0.2, -0.4, 0.9]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        let s = tape.row_softmax(c);
        let loss = tape.sum_all(s);
        tape.backward(loss).unwrap();
        let first = (
            tape.grad(a).unwrap().clone(),
            tape.grad(b).unwrap().clone(),
        );
        tape.backward(loss).unwrap();
        assert_eq!(first.0, *tape.grad(a).unwrap());
        assert_eq!(first.1, *tape.grad(b).unwrap());
    }
}
