//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order, so the node list
//! is already topologically sorted. [`Graph::backward`] walks it once in
//! reverse and accumulates gradients additively into each input.

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Relu(Var),
    Exp(Var),
    Clamp { x: Var, lo: T, hi: T },
    LogClamp { x: Var, floor: T },
    Softmax(Var),
    Sum(Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat(Vec<Var>),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    RmsNorm { x: Var, gamma: Var, denom: Vec<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T>, train: bool },
    AvgPool { x: Var, p: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-channel batch statistics produced by a training-mode batchnorm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance over the batch.
    pub var: Vec<T>,
    /// Number of values each channel statistic was taken over.
    pub count: usize,
}

/// The tape: values and the operations that produced them.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every grad-requiring leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    ops_visited: usize,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Number of non-leaf operations whose backward rule ran.
    pub fn ops_visited(&self) -> usize {
        self.ops_visited
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("non-empty shape")
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), check_finite: cfg!(debug_assertions) }
    }

    /// Toggle the non-finite value assertion (on by default in debug builds).
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        if self.check_finite {
            assert!(value.all_finite(), "non-finite value produced by {op:?}");
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, what)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `x[..., n] + bias[n]` broadcast over all leading positions.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = last_dim(tx.shape());
        if tb.shape() != [n] {
            return Err(dim_err!("bias {:?} does not match last axis of {:?}", tb.shape(), tx.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, &b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product of `[G,M,K]` with `[G,K,N]`, or with `[G,N,K]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ([ga, m, k], [gb, b1, b2]) = (sa, sb) else {
            return Err(dim_err!("bmm needs rank-3 operands, got {sa:?} and {sb:?}"));
        };
        let (kb, n) = if trans_b { (*b2, *b1) } else { (*b1, *b2) };
        if ga != gb || *k != kb {
            return Err(dim_err!("bmm operands {sa:?} and {sb:?} incompatible (trans_b={trans_b})"));
        }
        let (g, m, k) = (*ga, *m, *k);
        let mut out = vec![T::zero(); g * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..g {
            kernels::gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let out = Tensor::from_parts(vec![g, m, n], out);
        Ok(self.push(out, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::exp);
        self.push(out, Op::Exp(x), &[x])
    }

    /// Clamp to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(out, Op::Clamp { x, lo, hi }, &[x])
    }

    /// `ln(max(x, floor))`.
    pub fn log_clamped(&mut self, x: Var, floor: T) -> Var {
        let out = self.value(x).map(|v| v.max(floor).ln());
        self.push(out, Op::LogClamp { x, floor }, &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = kernels::softmax_rows(t.data(), last_dim(t.shape()));
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::Softmax(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).numel() as f64);
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..t.rank()).collect::<Vec<_>>() {
            return Err(dim_err!("{perm:?} is not a permutation of the axes of {:?}", t.shape()));
        }
        let (data, shape) = kernels::permute_raw(t.data(), t.shape(), perm);
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    /// Concatenate along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| dim_err!("concat of zero tensors"))?;
        let lead = &self.shape(*first)[..self.shape(*first).len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(dim_err!("concat: leading dims {:?} vs {:?}", s, self.shape(*first)));
            }
            widths.push(last_dim(s));
        }
        let total: usize = widths.iter().sum();
        let rows = self.value(*first).numel() / widths[0];
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    /// NHWC cross-correlation without bias; `x` is `[B,H,W,Cin]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        if self.shape(x).len() != 4 {
            return Err(dim_err!("graph conv2d expects [B,H,W,C], got {:?}", self.shape(x)));
        }
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        let data = kernels::conv2d_raw(self.value(x).data(), self.value(w).data(), &geom);
        let out = Tensor::from_parts(vec![geom.batch, geom.ho, geom.wo, geom.cout], data);
        Ok(self.push(out, Op::Conv2d { x, w, geom }, &[x, w]))
    }

    /// `gamma ⊙ x·√C / max(‖x‖₂, eps)` over the last axis at every position.
    pub fn rms_norm(&mut self, x: Var, gamma: Var, eps: T) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gamma));
        let c = last_dim(tx.shape());
        if tg.shape() != [c] {
            return Err(dim_err!("rmsnorm gain {:?} does not match channels of {:?}", tg.shape(), tx.shape()));
        }
        let root = T::lit(c as f64).sqrt();
        let mut denom = Vec::with_capacity(tx.numel() / c);
        let mut data = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks_exact(c) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let d = norm.max(eps);
            denom.push(d);
            data.extend(row.iter().zip(tg.data()).map(|(&v, &g)| g * v * root / d));
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(out, Op::RmsNorm { x, gamma, denom }, &[x, gamma]))
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let c = last_dim(self.shape(x));
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(dim_err!(
                "batchnorm affine {:?}/{:?} vs channels of {:?}",
                self.shape(gamma),
                self.shape(beta),
                self.shape(x)
            ));
        }
        Ok(c)
    }

    fn bn_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T>, train: bool) -> Var {
        let c = mean.len();
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for ch in 0..c {
                row[ch] = tg.data()[ch] * (row[ch] - mean[ch]) * inv_std[ch] + tb.data()[ch];
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(out, Op::BatchNorm { x, gamma, beta, mean, inv_std, train }, &[x, gamma, beta])
    }

    /// Training-mode batchnorm over all positions of the last (channel) axis.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let c = self.bn_check(x, gamma, beta)?;
        let tx = self.value(x);
        let rows = tx.numel() / c;
        let n = T::lit(rows as f64);
        let mut mean = vec![T::zero(); c];
        for row in tx.data().chunks_exact(c) {
            for ch in 0..c {
                mean[ch] += row[ch];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![T::zero(); c];
        for row in tx.data().chunks_exact(c) {
            for ch in 0..c {
                let d = row[ch] - mean[ch];
                var[ch] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let stats = BatchStats { mean: mean.clone(), var, count: rows };
        Ok((self.bn_apply(x, gamma, beta, mean, inv_std, true), stats))
    }

    /// Inference-mode batchnorm with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let c = self.bn_check(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(dim_err!("running statistics of length {} for {c} channels", mean.len()));
        }
        let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        Ok(self.bn_apply(x, gamma, beta, mean.to_vec(), inv_std, false))
    }

    /// Adaptive average pooling of `[B,H,W,C]` to `[B,P,P,C]`.
    pub fn adaptive_avg_pool(&mut self, x: Var, p: usize) -> Result<Var> {
        let [b, h, w, c] = *self.shape(x) else {
            return Err(dim_err!("adaptive pool expects [B,H,W,C], got {:?}", self.shape(x)));
        };
        if p == 0 || p > h || p > w {
            return Err(dim_err!("pool size {p} exceeds spatial extent {h}x{w}"));
        }
        let data = kernels::adaptive_avg_pool_raw(self.value(x).data(), (b, h, w, c), p);
        let out = Tensor::from_parts(vec![b, p, p, c], data);
        Ok(self.push(out, Op::AvgPool { x, p }, &[x]))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut visited = 0;
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads);
            visited += 1;
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads, ops_visited: visited })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]);
        f(slot);
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.acc(grads, *a, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(vb) {
                        *d += g * y;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(va) {
                        *d += g * x;
                    }
                });
            }
            Op::AddBias(x, b) => {
                self.acc(grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
                let n = self.nodes[b.0].value.numel();
                self.acc(grads, *b, |d| {
                    for row in g.chunks_exact(n) {
                        d.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                });
            }
            Op::Scale(x, c) => {
                self.acc(grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += *c * g));
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                self.acc(grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(*a), val(*b));
                self.acc(grads, *a, |d| kernels::gemm(m, n, k, g, false, vb, true, d, true));
                self.acc(grads, *b, |d| kernels::gemm(k, m, n, va, true, g, false, d, true));
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = self.nodes[a.0].value.shape();
                let (batches, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (va, vb) = (val(*a), val(*b));
                let (sz_a, sz_b, sz_o) = (m * k, k * n, m * n);
                self.acc(grads, *a, |d| {
                    for j in 0..batches {
                        let go = &g[j * sz_o..(j + 1) * sz_o];
                        let bj = &vb[j * sz_b..(j + 1) * sz_b];
                        let dj = &mut d[j * sz_a..(j + 1) * sz_a];
                        kernels::gemm(m, n, k, go, false, bj, !*trans_b, dj, true);
                    }
                });
                self.acc(grads, *b, |d| {
                    for j in 0..batches {
                        let go = &g[j * sz_o..(j + 1) * sz_o];
                        let aj = &va[j * sz_a..(j + 1) * sz_a];
                        let dj = &mut d[j * sz_b..(j + 1) * sz_b];
                        if *trans_b {
                            kernels::gemm(n, m, k, go, true, aj, false, dj, true);
                        } else {
                            kernels::gemm(k, m, n, aj, true, go, false, dj, true);
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let y = node.value.data();
                self.acc(grads, *x, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                        if y > T::zero() {
                            *d += g;
                        }
                    }
                });
            }
            Op::Exp(x) => {
                let y = node.value.data();
                self.acc(grads, *x, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * y;
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let vx = val(*x);
                self.acc(grads, *x, |d| {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(vx) {
                        if v >= *lo && v <= *hi {
                            *d += g;
                        }
                    }
                });
            }
            Op::LogClamp { x, floor } => {
                let vx = val(*x);
                self.acc(grads, *x, |d| {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(vx) {
                        if v > *floor {
                            *d += g / v;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = last_dim(node.value.shape());
                self.acc(grads, *x, |d| {
                    for ((d, g), y) in d.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n)) {
                        let dot: T = g.iter().zip(y).map(|(&g, &y)| g * y).sum();
                        for j in 0..n {
                            d[j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                self.acc(grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Permute { x, perm } => {
                let inv = kernels::inverse_permutation(perm);
                let (back, _) = kernels::permute_raw(g, node.value.shape(), &inv);
                self.acc(grads, *x, |d| d.iter_mut().zip(&back).for_each(|(d, &g)| *d += g));
            }
            Op::Concat(parts) => {
                let total = last_dim(node.value.shape());
                let rows = g.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = last_dim(self.nodes[p.0].value.shape());
                    self.acc(grads, p, |d| {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            d[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(d, &g)| *d += g);
                        }
                    });
                    offset += w;
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (vx, vw) = (val(*x), val(*w));
                let (rows, patch, cout) = (geom.rows(), geom.patch(), geom.cout);
                let pointwise = geom.k == 1 && geom.stride == 1 && geom.pad == 0;
                if self.nodes[w.0].requires_grad {
                    let cols = if pointwise { None } else { Some(kernels::im2col(vx, geom)) };
                    let cols = cols.as_deref().unwrap_or(vx);
                    self.acc(grads, *w, |d| kernels::gemm(patch, rows, cout, cols, true, g, false, d, true));
                }
                if self.nodes[x.0].requires_grad {
                    if pointwise {
                        self.acc(grads, *x, |d| kernels::gemm(rows, cout, patch, g, false, vw, true, d, true));
                    } else {
                        let mut dcols = vec![T::zero(); rows * patch];
                        kernels::gemm(rows, cout, patch, g, false, vw, true, &mut dcols, false);
                        self.acc(grads, *x, |d| kernels::col2im(&dcols, geom, d));
                    }
                }
            }
            Op::RmsNorm { x, gamma, denom } => {
                let (vx, vg) = (val(*x), val(*gamma));
                let c = vg.len();
                let root = T::lit(c as f64).sqrt();
                let eps_floor = |row: &[T], d: T| row.iter().map(|&v| v * v).sum::<T>().sqrt() < d;
                self.acc(grads, *x, |dx| {
                    for (p, ((dx, xr), gr)) in dx.chunks_exact_mut(c).zip(vx.chunks_exact(c)).zip(g.chunks_exact(c)).enumerate() {
                        let d = denom[p];
                        let clamped = eps_floor(xr, d);
                        let proj: T = if clamped {
                            T::zero()
                        } else {
                            gr.iter().zip(vg).zip(xr).map(|((&g, &gm), &x)| g * gm * x).sum()
                        };
                        let d3 = d * d * d;
                        for j in 0..c {
                            dx[j] += root * (vg[j] * gr[j] / d - xr[j] * proj / d3);
                        }
                    }
                });
                self.acc(grads, *gamma, |dg| {
                    for (p, (xr, gr)) in vx.chunks_exact(c).zip(g.chunks_exact(c)).enumerate() {
                        let d = denom[p];
                        for j in 0..c {
                            dg[j] += gr[j] * xr[j] * root / d;
                        }
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, train } => {
                let (vx, vg) = (val(*x), val(*gamma));
                let c = mean.len();
                let rows = vx.len() / c;
                let xhat = |r: usize, ch: usize| (vx[r * c + ch] - mean[ch]) * inv_std[ch];
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for r in 0..rows {
                    for ch in 0..c {
                        sum_g[ch] += g[r * c + ch];
                        sum_gx[ch] += g[r * c + ch] * xhat(r, ch);
                    }
                }
                self.acc(grads, *beta, |d| d.iter_mut().zip(&sum_g).for_each(|(d, &s)| *d += s));
                self.acc(grads, *gamma, |d| d.iter_mut().zip(&sum_gx).for_each(|(d, &s)| *d += s));
                let n = T::lit(rows as f64);
                self.acc(grads, *x, |d| {
                    for r in 0..rows {
                        for ch in 0..c {
                            let gi = g[r * c + ch];
                            let scale = vg[ch] * inv_std[ch];
                            d[r * c + ch] += if *train {
                                scale * (gi - sum_g[ch] / n - xhat(r, ch) * sum_gx[ch] / n)
                            } else {
                                scale * gi
                            };
                        }
                    }
                });
            }
            Op::AvgPool { x, p } => {
                let [b, h, w, c] = *self.nodes[x.0].value.shape() else { unreachable!() };
                let (ybins, xbins) = (kernels::adaptive_bins(h, *p), kernels::adaptive_bins(w, *p));
                self.acc(grads, *x, |d| {
                    for bi in 0..b {
                        for (py, &(y0, y1)) in ybins.iter().enumerate() {
                            for (px, &(x0, x1)) in xbins.iter().enumerate() {
                                let src = ((bi * p + py) * p + px) * c;
                                let inv = T::one() / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                                for y in y0..y1 {
                                    for xx in x0..x1 {
                                        let dst = ((bi * h + y) * w + xx) * c;
                                        for ch in 0..c {
                                            d[dst + ch] += g[src + ch] * inv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}
