//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is
//! a reverse topological order. Leaves may borrow their values (model
//! weights) for the lifetime of the graph.

use std::borrow::Cow;

use crate::error::TensorError;
use crate::tensor::Tensor;

pub const BATCHNORM_EPS: f32 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// Right operand is one row repeated over the left operand's rows.
    Rows,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    AddScalar(usize),
    Scale(usize, f32),
    Relu(usize),
    Exp(usize),
    Square(usize),
    Sum(usize),
    Reshape(usize),
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        train: bool,
    },
    Softmax(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
    Nll {
        probs: usize,
        targets: Vec<usize>,
    },
    GaussianSample {
        mu: usize,
        sigma: usize,
        eps: Vec<f32>,
    },
    GaussianKl {
        mu: usize,
        sigma: usize,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics computed by a training-mode batchnorm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f32>,
    pub batch: usize,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f32>>>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the callers pass slices whose extents cover every index
    // reachable from the given dimensions and strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[usize]) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed leaf that receives a gradient.
    pub fn param(&mut self, value: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(value), true)
    }

    /// Owned leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(Cow::Owned(value), true)
    }

    /// Borrowed leaf without a gradient.
    pub fn frozen(&mut self, value: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(value), false)
    }

    /// Owned leaf without a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(Cow::Owned(value), false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.val(a.0), self.val(b.0));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), (k, 1), tb.data(), (n, 1), 0.0, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    fn broadcast_kind(
        &self,
        op: &'static str,
        a: usize,
        b: usize,
    ) -> Result<Broadcast, TensorError> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() == tb.shape() {
            return Ok(Broadcast::Same);
        }
        let row_shaped = tb.shape().len() == 1 || (tb.shape().len() == 2 && tb.shape()[0] == 1);
        if ta.shape().len() == 2 && row_shaped && tb.len() == ta.shape()[1] {
            return Ok(Broadcast::Rows);
        }
        Err(mismatch(op, ta, tb))
    }

    fn zip_broadcast(
        &self,
        a: usize,
        b: usize,
        kind: Broadcast,
        f: impl Fn(f32, f32) -> f32,
    ) -> Tensor {
        let (ta, tb) = (self.val(a), self.val(b));
        let data = match kind {
            Broadcast::Same => ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
            Broadcast::Rows => {
                let c = tb.len();
                ta.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, tb.data()[i % c]))
                    .collect()
            }
        };
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    /// Elementwise sum; `b` may also be a single row added to every row of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let kind = self.broadcast_kind("add", a.0, b.0)?;
        let value = self.zip_broadcast(a.0, b.0, kind, |x, y| x + y);
        Ok(self.push(value, Op::Add(a.0, b.0, kind), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let kind = self.broadcast_kind("sub", a.0, b.0)?;
        let value = self.zip_broadcast(a.0, b.0, kind, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a.0, b.0, kind), &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let kind = self.broadcast_kind("mul", a.0, b.0)?;
        let value = self.zip_broadcast(a.0, b.0, kind, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a.0, b.0, kind), &[a.0, b.0]))
    }

    fn map(&self, a: usize, f: impl Fn(f32) -> f32) -> Tensor {
        let t = self.val(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
            .expect("shape preserved")
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let value = self.map(a.0, |x| x + c);
        self.push(value, Op::AddScalar(a.0), &[a.0])
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let value = self.map(a.0, |x| x * c);
        self.push(value, Op::Scale(a.0, c), &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.map(a.0, |x| x.max(0.0));
        self.push(value, Op::Relu(a.0), &[a.0])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.map(a.0, f32::exp);
        self.push(value, Op::Exp(a.0), &[a.0])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.map(a.0, |x| x * x);
        self.push(value, Op::Square(a.0), &[a.0])
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.val(a.0).data().iter().map(|&x| f64::from(x)).sum();
        self.push(Tensor::scalar(total as f32), Op::Sum(a.0), &[a.0])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.val(a.0).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a.0), &[a.0]))
    }

    /// Rows of `table` selected by `ids`, as a `[ids.len(), width]` matrix.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let t = self.val(table.0);
        if t.shape().len() != 2 {
            return Err(mismatch("embedding", t, t));
        }
        let (rows, width) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    index: id,
                    len: rows,
                });
            }
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), width], out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            &[table.0],
        ))
    }

    fn check_batchnorm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(usize, usize), TensorError> {
        let tx = self.val(x.0);
        if tx.shape().len() != 2 {
            return Err(mismatch("batchnorm", tx, tx));
        }
        let (b, f) = (tx.shape()[0], tx.shape()[1]);
        for p in [gamma, beta] {
            if self.val(p.0).len() != f {
                return Err(mismatch("batchnorm", tx, self.val(p.0)));
            }
        }
        Ok((b, f))
    }

    fn batchnorm_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f32],
        var: &[f32],
        train: bool,
    ) -> Var {
        let tx = self.val(x.0);
        let (b, f) = (tx.shape()[0], tx.shape()[1]);
        let inv_std: Vec<f32> = var
            .iter()
            .map(|&v| 1.0 / (v + BATCHNORM_EPS).sqrt())
            .collect();
        let (g, bt) = (self.val(gamma.0).data(), self.val(beta.0).data());
        let mut xhat = vec![0.0; b * f];
        let mut out = vec![0.0; b * f];
        for r in 0..b {
            for j in 0..f {
                let k = r * f + j;
                xhat[k] = (tx.data()[k] - mean[j]) * inv_std[j];
                out[k] = g[j] * xhat[k] + bt[j];
            }
        }
        let value = Tensor::new(vec![b, f], out).expect("shape preserved");
        self.push(
            value,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                train,
            },
            &[x.0, gamma.0, beta.0],
        )
    }

    /// Training-mode batchnorm over the rows of `x`, normalizing with the
    /// batch statistics, which are returned for running-average updates.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, BatchStats), TensorError> {
        let (b, f) = self.check_batchnorm(x, gamma, beta)?;
        let tx = self.val(x.0);
        let mut mean = vec![0f64; f];
        let mut var = vec![0f64; f];
        for r in 0..b {
            for (j, m) in mean.iter_mut().enumerate() {
                *m += f64::from(tx.data()[r * f + j]);
            }
        }
        for m in &mut mean {
            *m /= b as f64;
        }
        for r in 0..b {
            for j in 0..f {
                let d = f64::from(tx.data()[r * f + j]) - mean[j];
                var[j] += d * d;
            }
        }
        for v in &mut var {
            *v /= b as f64;
        }
        let stats = BatchStats {
            mean: mean.iter().map(|&m| m as f32).collect(),
            var: var.iter().map(|&v| v as f32).collect(),
            batch: b,
        };
        let out = self.batchnorm_apply(x, gamma, beta, &stats.mean, &stats.var, true);
        Ok((out, stats))
    }

    /// Evaluation-mode batchnorm with fixed statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f32],
        var: &[f32],
    ) -> Result<Var, TensorError> {
        let (_, f) = self.check_batchnorm(x, gamma, beta)?;
        if mean.len() != f || var.len() != f {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm",
                left: vec![f],
                right: vec![mean.len(), var.len()],
            });
        }
        Ok(self.batchnorm_apply(x, gamma, beta, mean, var, false))
    }

    fn softmax_rows(t: &Tensor) -> Vec<f32> {
        let c = t.cols();
        let mut out = vec![0.0; t.len()];
        for (row, dst) in t.data().chunks(c).zip(out.chunks_mut(c)) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut total = 0.0f32;
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - max).exp();
                total += *d;
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        out
    }

    /// Softmax over the last dimension of a matrix.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.val(a.0);
        if t.shape().len() != 2 {
            return Err(mismatch("softmax", t, t));
        }
        let value = Tensor::new(t.shape().to_vec(), Self::softmax_rows(t))?;
        Ok(self.push(value, Op::Softmax(a.0), &[a.0]))
    }

    fn check_targets(
        &self,
        op: &'static str,
        a: Var,
        targets: &[usize],
    ) -> Result<(), TensorError> {
        let t = self.val(a.0);
        if t.shape().len() != 2 || t.shape()[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op,
                left: t.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let c = t.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&k| k >= c) {
            return Err(TensorError::IndexOutOfRange { index: bad, len: c });
        }
        Ok(())
    }

    /// `-Σ_r log softmax(logits_r)[targets_r]`, computed stably from logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        self.check_targets("cross_entropy", logits, targets)?;
        let t = self.val(logits.0);
        let c = t.cols();
        let probs = Self::softmax_rows(t);
        let mut total = 0f64;
        for (r, &k) in targets.iter().enumerate() {
            let row = t.row(r);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse: f64 = row
                .iter()
                .map(|&x| f64::from(x - max).exp())
                .sum::<f64>()
                .ln()
                + f64::from(max);
            total += lse - f64::from(row[k]);
        }
        debug_assert_eq!(probs.len(), targets.len() * c);
        Ok(self.push(
            Tensor::scalar(total as f32),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            &[logits.0],
        ))
    }

    /// `-Σ_r log probs[r, targets_r]` on probabilities.
    pub fn one_hot_nll(&mut self, probs: Var, targets: &[usize]) -> Result<Var, TensorError> {
        self.check_targets("one_hot_nll", probs, targets)?;
        let t = self.val(probs.0);
        let mut total = 0f64;
        for (r, &k) in targets.iter().enumerate() {
            let p = t.row(r)[k];
            if p <= 0.0 {
                return Err(TensorError::NonPositiveLog("one_hot_nll"));
            }
            total -= f64::from(p).ln();
        }
        Ok(self.push(
            Tensor::scalar(total as f32),
            Op::Nll {
                probs: probs.0,
                targets: targets.to_vec(),
            },
            &[probs.0],
        ))
    }

    /// Reparameterized draw `mu + sigma * eps` with fixed noise `eps`.
    pub fn gaussian_sample(
        &mut self,
        mu: Var,
        sigma: Var,
        eps: Tensor,
    ) -> Result<Var, TensorError> {
        let (tm, ts) = (self.val(mu.0), self.val(sigma.0));
        if tm.shape() != ts.shape() {
            return Err(mismatch("gaussian_sample", tm, ts));
        }
        if eps.shape() != tm.shape() {
            return Err(mismatch("gaussian_sample", tm, &eps));
        }
        let data = tm
            .data()
            .iter()
            .zip(ts.data())
            .zip(eps.data())
            .map(|((&m, &s), &e)| m + s * e)
            .collect();
        let value = Tensor::new(tm.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            Op::GaussianSample {
                mu: mu.0,
                sigma: sigma.0,
                eps: eps.into_data(),
            },
            &[mu.0, sigma.0],
        ))
    }

    /// `KL(N(mu, sigma²) || N(0, 1))` summed over all elements.
    pub fn gaussian_kl(&mut self, mu: Var, sigma: Var) -> Result<Var, TensorError> {
        let (tm, ts) = (self.val(mu.0), self.val(sigma.0));
        if tm.shape() != ts.shape() {
            return Err(mismatch("gaussian_kl", tm, ts));
        }
        let mut total = 0f64;
        for (&m, &s) in tm.data().iter().zip(ts.data()) {
            if s <= 0.0 {
                return Err(TensorError::NonPositiveLog("gaussian_kl"));
            }
            let (m, s) = (f64::from(m), f64::from(s));
            total += -0.5 * (1.0 + (s * s).ln() - m * m - s * s);
        }
        Ok(self.push(
            Tensor::scalar(total as f32),
            Op::GaussianKl {
                mu: mu.0,
                sigma: sigma.0,
            },
            &[mu.0, sigma.0],
        ))
    }

    /// Gradient of the last [`backward`](Self::backward) loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone())
                .expect("grad matches value"),
        )
    }

    /// Moves the gradient of `v` out of the graph.
    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        let g = self.grads.get_mut(v.0)?.take()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g).expect("grad matches value"))
    }

    /// Fills gradients of every node that depends on a gradient-carrying leaf.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let lt = self.val(loss.0);
        if lt.len() != 1 {
            return Err(TensorError::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f32>>],
        target: usize,
        f: impl FnOnce(&mut [f32]),
    ) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let len = self.nodes[target].value.len();
        let g = grads[target].get_or_insert_with(|| vec![0.0; len]);
        f(g);
    }

    fn propagate(&self, i: usize, dy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(a), self.val(b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                // dA = dY · Bᵀ, dB = Aᵀ · dY
                self.accumulate(grads, a, |g| {
                    gemm(m, n, k, dy, (n, 1), tb.data(), (1, n), 1.0, g);
                });
                self.accumulate(grads, b, |g| {
                    gemm(k, m, n, ta.data(), (1, k), dy, (n, 1), 1.0, g);
                });
            }
            &Op::Add(a, b, kind) | &Op::Sub(a, b, kind) => {
                let sign = if matches!(self.nodes[i].op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                self.accumulate(grads, a, |g| {
                    for (gi, d) in g.iter_mut().zip(dy) {
                        *gi += d;
                    }
                });
                self.accumulate(grads, b, |g| match kind {
                    Broadcast::Same => {
                        for (gi, d) in g.iter_mut().zip(dy) {
                            *gi += sign * d;
                        }
                    }
                    Broadcast::Rows => {
                        let c = g.len();
                        for (k, d) in dy.iter().enumerate() {
                            g[k % c] += sign * d;
                        }
                    }
                });
            }
            &Op::Mul(a, b, kind) => {
                let (ta, tb) = (self.val(a).data(), self.val(b).data());
                let c = tb.len();
                let bval = |k: usize| match kind {
                    Broadcast::Same => tb[k],
                    Broadcast::Rows => tb[k % c],
                };
                self.accumulate(grads, a, |g| {
                    for (k, gi) in g.iter_mut().enumerate() {
                        *gi += dy[k] * bval(k);
                    }
                });
                self.accumulate(grads, b, |g| match kind {
                    Broadcast::Same => {
                        for (k, gi) in g.iter_mut().enumerate() {
                            *gi += dy[k] * ta[k];
                        }
                    }
                    Broadcast::Rows => {
                        for (k, d) in dy.iter().enumerate() {
                            g[k % c] += d * ta[k];
                        }
                    }
                });
            }
            &Op::AddScalar(a) | &Op::Reshape(a) => self.accumulate(grads, a, |g| {
                for (gi, d) in g.iter_mut().zip(dy) {
                    *gi += d;
                }
            }),
            &Op::Scale(a, c) => self.accumulate(grads, a, |g| {
                for (gi, d) in g.iter_mut().zip(dy) {
                    *gi += c * d;
                }
            }),
            &Op::Relu(a) => {
                let x = self.val(a).data();
                self.accumulate(grads, a, |g| {
                    for k in 0..g.len() {
                        if x[k] > 0.0 {
                            g[k] += dy[k];
                        }
                    }
                });
            }
            &Op::Exp(a) => self.accumulate(grads, a, |g| {
                for (k, gi) in g.iter_mut().enumerate() {
                    *gi += dy[k] * out.data()[k];
                }
            }),
            &Op::Square(a) => {
                let x = self.val(a).data();
                self.accumulate(grads, a, |g| {
                    for (k, gi) in g.iter_mut().enumerate() {
                        *gi += 2.0 * x[k] * dy[k];
                    }
                });
            }
            &Op::Sum(a) => self.accumulate(grads, a, |g| {
                for gi in g.iter_mut() {
                    *gi += dy[0];
                }
            }),
            Op::Embedding { table, ids } => {
                let width = self.val(*table).shape()[1];
                self.accumulate(grads, *table, |g| {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &dy[r * width..(r + 1) * width];
                        for (gi, d) in g[id * width..(id + 1) * width].iter_mut().zip(src) {
                            *gi += d;
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let f = inv_std.len();
                let b = xhat.len() / f;
                let gv = self.val(*gamma).data();
                let mut sum_dy = vec![0f32; f];
                let mut sum_dy_xhat = vec![0f32; f];
                for r in 0..b {
                    for j in 0..f {
                        let k = r * f + j;
                        sum_dy[j] += dy[k];
                        sum_dy_xhat[j] += dy[k] * xhat[k];
                    }
                }
                self.accumulate(grads, *gamma, |g| {
                    for (gi, s) in g.iter_mut().zip(&sum_dy_xhat) {
                        *gi += s;
                    }
                });
                self.accumulate(grads, *beta, |g| {
                    for (gi, s) in g.iter_mut().zip(&sum_dy) {
                        *gi += s;
                    }
                });
                let bf = b as f32;
                self.accumulate(grads, *x, |g| {
                    for r in 0..b {
                        for j in 0..f {
                            let k = r * f + j;
                            g[k] += if *train {
                                // dxhat = dy·γ; dx = (invstd/B)(B·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                                gv[j] * inv_std[j] / bf
                                    * (bf * dy[k] - sum_dy[j] - xhat[k] * sum_dy_xhat[j])
                            } else {
                                gv[j] * inv_std[j] * dy[k]
                            };
                        }
                    }
                });
            }
            &Op::Softmax(a) => {
                let c = out.cols();
                let y = out.data();
                self.accumulate(grads, a, |g| {
                    for r in 0..out.rows() {
                        let span = r * c..(r + 1) * c;
                        let dot: f32 = dy[span.clone()]
                            .iter()
                            .zip(&y[span.clone()])
                            .map(|(d, p)| d * p)
                            .sum();
                        for k in span {
                            g[k] += y[k] * (dy[k] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = probs.len() / targets.len().max(1);
                self.accumulate(grads, *logits, |g| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            g[r * c + j] += dy[0] * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Nll { probs, targets } => {
                let p = self.val(*probs);
                let c = p.cols();
                self.accumulate(grads, *probs, |g| {
                    for (r, &t) in targets.iter().enumerate() {
                        g[r * c + t] -= dy[0] / p.data()[r * c + t];
                    }
                });
            }
            Op::GaussianSample { mu, sigma, eps } => {
                self.accumulate(grads, *mu, |g| {
                    for (gi, d) in g.iter_mut().zip(dy) {
                        *gi += d;
                    }
                });
                self.accumulate(grads, *sigma, |g| {
                    for (k, gi) in g.iter_mut().enumerate() {
                        *gi += dy[k] * eps[k];
                    }
                });
            }
            Op::GaussianKl { mu, sigma } => {
                let (m, s) = (self.val(*mu).data(), self.val(*sigma).data());
                self.accumulate(grads, *mu, |g| {
                    for (k, gi) in g.iter_mut().enumerate() {
                        *gi += dy[0] * m[k];
                    }
                });
                self.accumulate(grads, *sigma, |g| {
                    for (k, gi) in g.iter_mut().enumerate() {
                        *gi += dy[0] * (s[k] - 1.0 / s[k]);
                    }
                });
            }
        }
    }
}
