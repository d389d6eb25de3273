//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Every op records a backward step on the value it produces; calling
//! [`Tensor::backward`] on a scalar walks the recorded graph in reverse
//! topological order and accumulates gradients into the `requires_grad`
//! leaves. Graphs are `Rc`-linked and therefore single-threaded by
//! construction; independent graphs on different threads share nothing.
//!
//! Training runs in `f32`; the same ops instantiate at `f64` for the
//! finite-difference gradient checker.

use std::cell::{Cell, RefCell};
use std::collections::hash_map::Entry;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Element type for tensors: `f32` for training, `f64` for grad checking.
pub trait Scalar: num_traits::Float + fmt::Debug + fmt::Display + std::iter::Sum + 'static {
    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    fn from_f32(v: f32) -> Self {
        v
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Backward callback: given the node's parents and its incoming cotangent,
/// emit `(parent_index, cotangent)` pairs through the sink.
type BackFn<S> = Box<dyn Fn(&[Tensor<S>], &[S], &mut dyn FnMut(usize, Vec<S>))>;

struct Step<S: Scalar> {
    parents: Vec<Tensor<S>>,
    back: BackFn<S>,
}

struct Inner<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<S>>>,
    step: Option<Step<S>>,
}

/// A dense tensor; cheap to clone (shared immutable storage).
pub struct Tensor<S: Scalar> {
    inner: Rc<Inner<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    fn make(
        shape: Vec<usize>,
        data: Vec<S>,
        requires_grad: bool,
        step: Option<Step<S>>,
    ) -> Tensor<S> {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                step,
            }),
        }
    }

    /// Constant leaf: no gradient is ever recorded for it.
    pub fn constant(data: Vec<S>, shape: Vec<usize>) -> Tensor<S> {
        Tensor::make(shape, data, false, None)
    }

    /// Trainable leaf: `backward` accumulates a gradient buffer on it.
    pub fn param(data: Vec<S>, shape: Vec<usize>) -> Tensor<S> {
        Tensor::make(shape, data, true, None)
    }

    pub fn leaf(data: Vec<S>, shape: Vec<usize>, requires_grad: bool) -> Tensor<S> {
        Tensor::make(shape, data, requires_grad, None)
    }

    pub fn scalar(v: S) -> Tensor<S> {
        Tensor::constant(vec![v], vec![1])
    }

    fn from_op(parents: Vec<Tensor<S>>, shape: Vec<usize>, data: Vec<S>, back: BackFn<S>) -> Tensor<S> {
        let recorded = parents.iter().any(Tensor::participates);
        let step = recorded.then_some(Step { parents, back });
        Tensor::make(shape, data, false, step)
    }

    /// Scalar node with a single parent and a hand-written backward rule;
    /// used by the fused loss ops.
    pub(crate) fn from_loss_op(
        parent: Tensor<S>,
        value: S,
        back: Box<dyn Fn(&[Tensor<S>], &[S], &mut dyn FnMut(usize, Vec<S>))>,
    ) -> Tensor<S> {
        Tensor::from_op(vec![parent], vec![1], vec![value], back)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[S] {
        &self.inner.data
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    /// Number of rows/cols when viewed as a matrix ([r] is treated as [1, r]).
    pub fn rows(&self) -> usize {
        match self.inner.shape.len() {
            0 | 1 => 1,
            _ => self.inner.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.inner.shape.len() {
            0 => 0,
            1 => self.inner.shape[0],
            _ => self.inner.shape[1],
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True when the node is on the recorded graph (a trainable leaf or a
    /// value computed from one).
    pub fn participates(&self) -> bool {
        self.inner.requires_grad || self.inner.step.is_some()
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Constant copy sharing no graph history with `self`.
    pub fn detach(&self) -> Tensor<S> {
        Tensor::constant(self.inner.data.clone(), self.inner.shape.clone())
    }

    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data[0]
    }

    /// Reverse-mode gradient propagation from a scalar.
    ///
    /// Gradients accumulate into `requires_grad` leaves; calling `backward`
    /// again without `zero_grad` adds on top of the previous pass.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.participates() {
            return Ok(());
        }

        // Post-order DFS so that `order` lists parents before consumers.
        enum Frame<S: Scalar> {
            Enter(Tensor<S>),
            Exit(Tensor<S>),
        }
        let mut order: Vec<Tensor<S>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack = vec![Frame::Enter(self.clone())];
        while let Some(frame) = stack.pop() {
            match frame {
                Frame::Enter(t) => {
                    if !t.participates() || !visited.insert(t.id()) {
                        continue;
                    }
                    stack.push(Frame::Exit(t.clone()));
                    if let Some(step) = &t.inner.step {
                        for p in &step.parents {
                            if p.participates() && !visited.contains(&p.id()) {
                                stack.push(Frame::Enter(p.clone()));
                            }
                        }
                    }
                }
                Frame::Exit(t) => order.push(t),
            }
        }

        let mut cot: HashMap<u64, Vec<S>> = HashMap::new();
        cot.insert(self.id(), vec![S::one()]);
        for t in order.iter().rev() {
            let Some(d_out) = cot.remove(&t.id()) else {
                continue;
            };
            if t.inner.requires_grad {
                let mut slot = t.inner.grad.borrow_mut();
                match slot.as_mut() {
                    Some(buf) => {
                        for (g, d) in buf.iter_mut().zip(&d_out) {
                            *g = *g + *d;
                        }
                    }
                    None => *slot = Some(d_out.clone()),
                }
            }
            if let Some(step) = &t.inner.step {
                let parents = &step.parents;
                (step.back)(parents, &d_out, &mut |idx, gvec| {
                    let p = &parents[idx];
                    if !p.participates() {
                        return;
                    }
                    debug_assert_eq!(gvec.len(), p.numel(), "cotangent size mismatch");
                    match cot.entry(p.id()) {
                        Entry::Occupied(mut e) => {
                            for (a, b) in e.get_mut().iter_mut().zip(&gvec) {
                                *a = *a + *b;
                            }
                        }
                        Entry::Vacant(e) => {
                            e.insert(gvec);
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

// ── raw kernels ──────────────────────────────────────────────────────

/// out += a @ b with a: [m,k], b: [k,n] (ikj order; vectorizes per row).
pub(crate) fn matmul_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Dot product with four independent accumulators so the chain pipelines.
pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); 4];
    let chunks = a.len() / 4 * 4;
    let (ah, at) = a.split_at(chunks);
    let (bh, bt) = b.split_at(chunks);
    for (x, y) in ah.chunks_exact(4).zip(bh.chunks_exact(4)) {
        acc[0] = acc[0] + x[0] * y[0];
        acc[1] = acc[1] + x[1] * y[1];
        acc[2] = acc[2] + x[2] * y[2];
        acc[3] = acc[3] + x[3] * y[3];
    }
    let mut tail = S::zero();
    for (x, y) in at.iter().zip(bt) {
        tail = tail + *x * *y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// out[i,j] = dot(a_row_i, b_row_j) with a: [m,k], b: [n,k].
pub(crate) fn matmul_nt_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

fn softmax_rows<S: Scalar>(data: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for (o, &x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            let e = (x - max).exp();
            *o = e;
            sum = sum + e;
        }
        let inv = S::one() / sum;
        for o in &mut out[r * cols..(r + 1) * cols] {
            *o = *o * inv;
        }
    }
    out
}

// ── ops ──────────────────────────────────────────────────────────────

impl<S: Scalar> Tensor<S> {
    /// Elementwise sum; shapes must match.
    pub fn add(&self, other: &Tensor<S>) -> Tensor<S> {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a + b)
            .collect();
        Tensor::from_op(
            vec![self.clone(), other.clone()],
            self.shape().to_vec(),
            data,
            Box::new(|_, d_out, sink| {
                sink(0, d_out.to_vec());
                sink(1, d_out.to_vec());
            }),
        )
    }

    /// Adds a length-`cols` vector to every row of a matrix.
    pub fn add_row(&self, bias: &Tensor<S>) -> Tensor<S> {
        let (_r, c) = (self.rows(), self.cols());
        assert_eq!(bias.numel(), c, "add_row: bias length mismatch");
        let mut data = self.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (x, &b) in row.iter_mut().zip(bias.data()) {
                *x = *x + b;
            }
        }
        Tensor::from_op(
            vec![self.clone(), bias.clone()],
            self.shape().to_vec(),
            data,
            Box::new(move |_, d_out, sink| {
                sink(0, d_out.to_vec());
                let mut db = vec![S::zero(); c];
                for row in d_out.chunks_exact(c) {
                    for (g, &d) in db.iter_mut().zip(row) {
                        *g = *g + d;
                    }
                }
                sink(1, db);
            }),
        )
    }

    /// Elementwise product; shapes must match.
    pub fn mul(&self, other: &Tensor<S>) -> Tensor<S> {
        assert_eq!(self.shape(), other.shape(), "mul: shape mismatch");
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .collect();
        Tensor::from_op(
            vec![self.clone(), other.clone()],
            self.shape().to_vec(),
            data,
            Box::new(|parents, d_out, sink| {
                let a = parents[0].data();
                let b = parents[1].data();
                sink(0, d_out.iter().zip(b).map(|(&d, &x)| d * x).collect());
                sink(1, d_out.iter().zip(a).map(|(&d, &x)| d * x).collect());
            }),
        )
    }

    /// Multiplication by a compile-time constant factor.
    pub fn scale(&self, factor: S) -> Tensor<S> {
        let data = self.data().iter().map(|&x| x * factor).collect();
        Tensor::from_op(
            vec![self.clone()],
            self.shape().to_vec(),
            data,
            Box::new(move |_, d_out, sink| {
                sink(0, d_out.iter().map(|&d| d * factor).collect());
            }),
        )
    }

    /// Matrix product [m,k] @ [k,n] -> [m,n].
    pub fn matmul(&self, other: &Tensor<S>) -> Tensor<S> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let mut data = vec![S::zero(); m * n];
        matmul_acc(self.data(), other.data(), m, k, n, &mut data);
        Tensor::from_op(
            vec![self.clone(), other.clone()],
            vec![m, n],
            data,
            Box::new(move |parents, d_out, sink| {
                // d_a = d_out @ b^T ; d_b = a^T @ d_out
                let a = parents[0].data();
                let b = parents[1].data();
                let mut da = vec![S::zero(); m * k];
                matmul_nt_raw(d_out, b, m, n, k, &mut da);
                sink(0, da);
                let mut db = vec![S::zero(); k * n];
                for i in 0..m {
                    let arow = &a[i * k..(i + 1) * k];
                    let drow = &d_out[i * n..(i + 1) * n];
                    for (p, &av) in arow.iter().enumerate() {
                        let dbrow = &mut db[p * n..(p + 1) * n];
                        for (g, &d) in dbrow.iter_mut().zip(drow) {
                            *g = *g + av * d;
                        }
                    }
                }
                sink(1, db);
            }),
        )
    }

    /// Matrix product against a transposed right factor: [m,k] @ [n,k]^T -> [m,n].
    pub fn matmul_nt(&self, other: &Tensor<S>) -> Tensor<S> {
        let (m, k) = (self.rows(), self.cols());
        let (n, k2) = (other.rows(), other.cols());
        assert_eq!(k, k2, "matmul_nt: inner dims {k} vs {k2}");
        let mut data = vec![S::zero(); m * n];
        matmul_nt_raw(self.data(), other.data(), m, k, n, &mut data);
        Tensor::from_op(
            vec![self.clone(), other.clone()],
            vec![m, n],
            data,
            Box::new(move |parents, d_out, sink| {
                // out = a @ b^T: d_a = d_out @ b ; d_b = d_out^T @ a
                let a = parents[0].data();
                let b = parents[1].data();
                let mut da = vec![S::zero(); m * k];
                matmul_acc(d_out, b, m, n, k, &mut da);
                sink(0, da);
                let mut db = vec![S::zero(); n * k];
                for i in 0..m {
                    let drow = &d_out[i * n..(i + 1) * n];
                    let arow = &a[i * k..(i + 1) * k];
                    for (j, &dv) in drow.iter().enumerate() {
                        let dbrow = &mut db[j * k..(j + 1) * k];
                        for (g, &av) in dbrow.iter_mut().zip(arow) {
                            *g = *g + dv * av;
                        }
                    }
                }
                sink(1, db);
            }),
        )
    }

    /// Row-wise softmax.
    pub fn softmax(&self) -> Tensor<S> {
        let (r, c) = (self.rows(), self.cols());
        let out = softmax_rows(self.data(), r, c);
        let saved = out.clone();
        Tensor::from_op(
            vec![self.clone()],
            self.shape().to_vec(),
            out,
            Box::new(move |_, d_out, sink| {
                let mut dx = vec![S::zero(); r * c];
                for row in 0..r {
                    let base = row * c;
                    let y = &saved[base..base + c];
                    let d = &d_out[base..base + c];
                    let dot = dot(y, d);
                    for j in 0..c {
                        dx[base + j] = y[j] * (d[j] - dot);
                    }
                }
                sink(0, dx);
            }),
        )
    }

    /// Row-wise softmax over a lower-triangular support: row `i` attends to
    /// columns `0..=i`. Requires a square matrix.
    pub fn causal_softmax(&self) -> Tensor<S> {
        let (r, c) = (self.rows(), self.cols());
        assert_eq!(r, c, "causal_softmax: matrix must be square");
        let data = self.data();
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &data[i * c..i * c + i + 1];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                out[i * c + j] = e;
                sum = sum + e;
            }
            let inv = S::one() / sum;
            for j in 0..=i {
                out[i * c + j] = out[i * c + j] * inv;
            }
        }
        let saved = out.clone();
        Tensor::from_op(
            vec![self.clone()],
            self.shape().to_vec(),
            out,
            Box::new(move |_, d_out, sink| {
                let mut dx = vec![S::zero(); r * c];
                for i in 0..r {
                    let base = i * c;
                    let y = &saved[base..base + i + 1];
                    let d = &d_out[base..base + i + 1];
                    let dot = dot(y, d);
                    for j in 0..=i {
                        dx[base + j] = y[j] * (d[j] - dot);
                    }
                }
                sink(0, dx);
            }),
        )
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&self) -> Tensor<S> {
        let (r, c) = (self.rows(), self.cols());
        let data = self.data();
        let mut out = vec![S::zero(); r * c];
        for row in 0..r {
            let x = &data[row * c..(row + 1) * c];
            let max = x.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for &v in x {
                sum = sum + (v - max).exp();
            }
            let lse = max + sum.ln();
            for (o, &v) in out[row * c..(row + 1) * c].iter_mut().zip(x) {
                *o = v - lse;
            }
        }
        let saved = out.clone();
        Tensor::from_op(
            vec![self.clone()],
            self.shape().to_vec(),
            out,
            Box::new(move |_, d_out, sink| {
                let mut dx = vec![S::zero(); r * c];
                for row in 0..r {
                    let base = row * c;
                    let d = &d_out[base..base + c];
                    let dsum: S = d.iter().copied().sum();
                    for j in 0..c {
                        dx[base + j] = d[j] - saved[base + j].exp() * dsum;
                    }
                }
                sink(0, dx);
            }),
        )
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&self, gamma: &Tensor<S>, beta: &Tensor<S>, eps: S) -> Tensor<S> {
        let (r, c) = (self.rows(), self.cols());
        assert_eq!(gamma.numel(), c, "layer_norm: gamma length mismatch");
        assert_eq!(beta.numel(), c, "layer_norm: beta length mismatch");
        let data = self.data();
        let mut xhat = vec![S::zero(); r * c];
        let mut inv_std = vec![S::zero(); r];
        let inv_c = S::one() / S::from_usize(c);
        for row in 0..r {
            let x = &data[row * c..(row + 1) * c];
            let mean = x.iter().copied().sum::<S>() * inv_c;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_c;
            let inv = S::one() / (var + eps).sqrt();
            inv_std[row] = inv;
            for (o, &v) in xhat[row * c..(row + 1) * c].iter_mut().zip(x) {
                *o = (v - mean) * inv;
            }
        }
        let mut out = vec![S::zero(); r * c];
        for row in 0..r {
            for j in 0..c {
                out[row * c + j] = xhat[row * c + j] * gamma.data()[j] + beta.data()[j];
            }
        }
        Tensor::from_op(
            vec![self.clone(), gamma.clone(), beta.clone()],
            self.shape().to_vec(),
            out,
            Box::new(move |parents, d_out, sink| {
                let g = parents[1].data();
                let mut dx = vec![S::zero(); r * c];
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                for row in 0..r {
                    let base = row * c;
                    let d = &d_out[base..base + c];
                    let xh = &xhat[base..base + c];
                    let mut mean_dxhat = S::zero();
                    let mut mean_dxhat_xhat = S::zero();
                    for j in 0..c {
                        let dxhat = d[j] * g[j];
                        mean_dxhat = mean_dxhat + dxhat;
                        mean_dxhat_xhat = mean_dxhat_xhat + dxhat * xh[j];
                        dgamma[j] = dgamma[j] + d[j] * xh[j];
                        dbeta[j] = dbeta[j] + d[j];
                    }
                    mean_dxhat = mean_dxhat * inv_c;
                    mean_dxhat_xhat = mean_dxhat_xhat * inv_c;
                    for j in 0..c {
                        let dxhat = d[j] * g[j];
                        dx[base + j] = inv_std[row] * (dxhat - mean_dxhat - xh[j] * mean_dxhat_xhat);
                    }
                }
                sink(0, dx);
                sink(1, dgamma);
                sink(2, dbeta);
            }),
        )
    }

    /// GELU activation (tanh approximation).
    pub fn gelu(&self) -> Tensor<S> {
        let half = S::from_f64(0.5);
        let c0 = S::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
        let c1 = S::from_f64(0.044715);
        let data = self
            .data()
            .iter()
            .map(|&x| {
                let u = c0 * (x + c1 * x * x * x);
                half * x * (S::one() + u.tanh())
            })
            .collect();
        Tensor::from_op(
            vec![self.clone()],
            self.shape().to_vec(),
            data,
            Box::new(move |parents, d_out, sink| {
                let x = parents[0].data();
                let three = S::from_f64(3.0);
                let dx = d_out
                    .iter()
                    .zip(x)
                    .map(|(&d, &v)| {
                        let u = c0 * (v + c1 * v * v * v);
                        let t = u.tanh();
                        let du = c0 * (S::one() + three * c1 * v * v);
                        d * (half * (S::one() + t) + half * v * (S::one() - t * t) * du)
                    })
                    .collect();
                sink(0, dx);
            }),
        )
    }

    /// Embedding lookup: rows of `table` gathered by id.
    pub fn embedding(table: &Tensor<S>, ids: &[usize]) -> Tensor<S> {
        let (v, d) = (table.rows(), table.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "embedding: id {id} out of range {v}");
            data.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
        }
        let ids_owned = ids.to_vec();
        let t = ids.len();
        Tensor::from_op(
            vec![table.clone()],
            vec![t, d],
            data,
            Box::new(move |_, d_out, sink| {
                let mut dt = vec![S::zero(); v * d];
                for (pos, &id) in ids_owned.iter().enumerate() {
                    let src = &d_out[pos * d..(pos + 1) * d];
                    let dst = &mut dt[id * d..(id + 1) * d];
                    for (g, &x) in dst.iter_mut().zip(src) {
                        *g = *g + x;
                    }
                }
                sink(0, dt);
            }),
        )
    }

    /// Concatenation along the sequence (row) axis.
    pub fn concat_rows(parts: &[Tensor<S>]) -> Tensor<S> {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let c = parts[0].cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            assert_eq!(p.cols(), c, "concat_rows: column mismatch");
            rows += p.rows();
            data.extend_from_slice(p.data());
        }
        let sizes: Vec<usize> = parts.iter().map(Tensor::numel).collect();
        Tensor::from_op(
            parts.to_vec(),
            vec![rows, c],
            data,
            Box::new(move |_, d_out, sink| {
                let mut offset = 0;
                for (idx, &len) in sizes.iter().enumerate() {
                    sink(idx, d_out[offset..offset + len].to_vec());
                    offset += len;
                }
            }),
        )
    }

    /// Contiguous row slice `[start, start+len)`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor<S> {
        let (r, c) = (self.rows(), self.cols());
        assert!(start + len <= r, "slice_rows: [{start}, {}) out of {r}", start + len);
        let data = self.data()[start * c..(start + len) * c].to_vec();
        Tensor::from_op(
            vec![self.clone()],
            vec![len, c],
            data,
            Box::new(move |_, d_out, sink| {
                let mut dx = vec![S::zero(); r * c];
                dx[start * c..(start + len) * c].copy_from_slice(d_out);
                sink(0, dx);
            }),
        )
    }

    /// Contiguous column slice `[start, start+len)` of every row.
    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor<S> {
        let (r, c) = (self.rows(), self.cols());
        assert!(start + len <= c, "slice_cols: [{start}, {}) out of {c}", start + len);
        let src = self.data();
        let mut data = Vec::with_capacity(r * len);
        for row in 0..r {
            data.extend_from_slice(&src[row * c + start..row * c + start + len]);
        }
        Tensor::from_op(
            vec![self.clone()],
            vec![r, len],
            data,
            Box::new(move |_, d_out, sink| {
                let mut dx = vec![S::zero(); r * c];
                for row in 0..r {
                    dx[row * c + start..row * c + start + len]
                        .copy_from_slice(&d_out[row * len..(row + 1) * len]);
                }
                sink(0, dx);
            }),
        )
    }

    /// Concatenation along the feature (column) axis.
    pub fn concat_cols(parts: &[Tensor<S>]) -> Tensor<S> {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let r = parts[0].rows();
        let widths: Vec<usize> = parts.iter().map(Tensor::cols).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for row in 0..r {
            for p in parts {
                assert_eq!(p.rows(), r, "concat_cols: row mismatch");
                let w = p.cols();
                data.extend_from_slice(&p.data()[row * w..(row + 1) * w]);
            }
        }
        Tensor::from_op(
            parts.to_vec(),
            vec![r, total],
            data,
            Box::new(move |_, d_out, sink| {
                let mut offset = 0;
                for (idx, &w) in widths.iter().enumerate() {
                    let mut dp = Vec::with_capacity(r * w);
                    for row in 0..r {
                        let base = row * total + offset;
                        dp.extend_from_slice(&d_out[base..base + w]);
                    }
                    sink(idx, dp);
                    offset += w;
                }
            }),
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Tensor<S> {
        let total = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![self.clone()],
            vec![1],
            vec![total],
            Box::new(move |_, d_out, sink| {
                sink(0, vec![d_out[0]; n]);
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        // y = x*x at x=3 -> dy/dx = 6
        let x = Tensor::<f64>::param(vec![3.0], vec![1]);
        let y = x.mul(&x);
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let x = Tensor::<f64>::param(vec![3.0], vec![1]);
        let y = x.mul(&x);
        y.backward().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![12.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], vec![2]);
        let y = x.add(&x);
        assert!(y.backward().is_err());
    }

    #[test]
    fn constants_build_no_graph() {
        let a = Tensor::<f32>::constant(vec![1.0, 2.0], vec![2]);
        let b = Tensor::<f32>::constant(vec![3.0, 4.0], vec![2]);
        let c = a.add(&b);
        assert!(!c.participates());
        assert!(c.backward().is_err()); // non-scalar
        let s = c.sum();
        assert!(!s.participates());
        s.backward().unwrap(); // no-op
        assert!(a.grad().is_none());
    }

    #[test]
    fn matmul_values() {
        let a = Tensor::<f64>::constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]);
        let b = Tensor::<f64>::constant(vec![5.0, 6.0, 7.0, 8.0], vec![2, 2]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
        let c2 = a.matmul_nt(&b.detach_transposed_for_test());
        assert_eq!(c2.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    impl Tensor<f64> {
        fn detach_transposed_for_test(&self) -> Tensor<f64> {
            let (r, c) = (self.rows(), self.cols());
            let mut t = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    t[j * r + i] = self.data()[i * c + j];
                }
            }
            Tensor::constant(t, vec![c, r])
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::<f32>::constant(vec![0.1, 1.5, -2.0, 0.0, 3.0, 0.5], vec![2, 3]);
        let y = x.softmax();
        for row in y.data().chunks_exact(3) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn log_softmax_exp_sums_to_one() {
        let x = Tensor::<f32>::constant(vec![0.3, -0.7, 2.0, 1.0], vec![1, 4]);
        let y = x.log_softmax();
        let s: f32 = y.data().iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-5);
    }

    #[test]
    fn causal_softmax_upper_triangle_is_zero() {
        let x = Tensor::<f64>::constant(vec![1.0; 9], vec![3, 3]);
        let y = x.causal_softmax();
        assert_eq!(y.data()[1], 0.0);
        assert_eq!(y.data()[2], 0.0);
        assert_eq!(y.data()[5], 0.0);
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!((y.data()[3] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn embedding_gathers_and_scatters() {
        let table = Tensor::<f64>::param(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![3, 2]);
        let e = Tensor::embedding(&table, &[2, 0, 2]);
        assert_eq!(e.data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        e.sum().backward().unwrap();
        assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn slice_and_concat_roundtrip() {
        let x = Tensor::<f64>::constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![3, 2]);
        let top = x.slice_rows(0, 1);
        let rest = x.slice_rows(1, 2);
        let back = Tensor::concat_rows(&[top, rest]);
        assert_eq!(back.data(), x.data());

        let left = x.slice_cols(0, 1);
        let right = x.slice_cols(1, 1);
        let back = Tensor::concat_cols(&[left, right]);
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn same_input_twice_is_bitwise_deterministic() {
        let x = Tensor::<f32>::constant(vec![0.5, -1.25, 2.0, 0.125], vec![2, 2]);
        let w = Tensor::<f32>::constant(vec![0.1, 0.2, 0.3, 0.4], vec![2, 2]);
        let a = x.matmul(&w).gelu().softmax();
        let b = x.matmul(&w).gelu().softmax();
        assert_eq!(a.data(), b.data());
    }
}
