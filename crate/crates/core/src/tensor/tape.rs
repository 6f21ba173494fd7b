use std::sync::Arc;

use super::kernels::{self, dot};
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One attention block: queries `q_start..q_start+q_len` attend to keys
/// `k_start..k_start+k_len` (row ranges of the packed query/key matrices).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        smoothing: T,
        probs: Vec<T>,
        count: usize,
    },
    Sum(Var),
    Mean(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<AttnSegment>,
        heads: usize,
        causal: bool,
    },
    Gather {
        x: Var,
        index: Vec<Option<usize>>,
    },
    Slice {
        x: Var,
        offset: usize,
    },
    Reshape(Var),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Linear record of executed operations. Node order is a topological order,
/// so the reverse pass walks the nodes back to front exactly once.
pub struct Tape<T: Float = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Float>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        self.push_shared(op_name, Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, op_name: &'static str, value: Arc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        check_finite(op_name, value.data())?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input tensor. Gradients are tracked iff the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Result<Var> {
        let rg = t.requires_grad();
        let mut value = t;
        value.clear_grad();
        self.push("leaf", value, Op::Leaf, rg)
    }

    /// Records a shared tensor without copying it (model parameters).
    pub fn shared(&mut self, t: Arc<Tensor<T>>, requires_grad: bool) -> Result<Var> {
        self.push_shared("leaf", t, Op::Leaf, requires_grad)
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.leaf(t.with_requires_grad(false))
    }

    /// Records a tensor that receives a gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Result<Var> {
        self.leaf(t.with_requires_grad(true))
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, format!("expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(name, Tensor::from_parts(shape, out), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds vector `b[d]` to every row of `x[.., d]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(b).numel() != d || self.value(x).rank() == 0 {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", self.shape(x), self.shape(b)),
            ));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(b);
        self.push("add_row", Tensor::from_parts(shape, out), Op::AddRow(x, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out: Vec<T> = self.value(a).data().iter().map(|&v| v * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push("scale", Tensor::from_parts(shape, out), Op::Scale(a, c), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<T> = self.value(a).data().iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push("gelu", Tensor::from_parts(shape, out), Op::Gelu(a), rg)
    }

    /// Row-wise `(x − mean)/sqrt(var + eps) · gain + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        if !(eps > T::zero()) {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        let d = self.value(x).cols();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", self.shape(x), self.shape(gain), self.shape(bias)),
            ));
        }
        let rows = self.value(x).rows();
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let inv_d = T::one() / T::cast(d as f64);
        let mut xhat = vec![T::zero(); xs.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            "layer_norm",
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if d == 0 || self.value(x).numel() == 0 {
            return Err(Error::invalid("softmax of an empty input"));
        }
        let mut out = self.value(x).data().to_vec();
        out.chunks_mut(d).for_each(kernels::softmax_in_place);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push("softmax", Tensor::from_parts(shape, out), Op::Softmax(x), rg)
    }

    /// Row-wise log-softmax over the last dimension.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if d == 0 || self.value(x).numel() == 0 {
            return Err(Error::invalid("log_softmax of an empty input"));
        }
        let mut out = self.value(x).data().to_vec();
        out.chunks_mut(d).for_each(kernels::log_softmax_in_place);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push("log_softmax", Tensor::from_parts(shape, out), Op::LogSoftmax(x), rg)
    }

    /// Mean label-smoothed cross entropy over the unmasked rows of
    /// `logits[L, V]`. A `None` target marks a padding row. The smoothed
    /// distribution puts `1 − ε` on the target and spreads `ε` evenly over
    /// the other `V − 1` tokens.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], smoothing: T) -> Result<Var> {
        let (rows, v) = self.matrix_dims("cross_entropy", logits)?;
        if targets.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!("{rows} rows but {} targets", targets.len()),
            ));
        }
        if !(smoothing >= T::zero() && smoothing < T::one()) {
            return Err(Error::invalid("label smoothing must lie in [0, 1)"));
        }
        if smoothing > T::zero() && v < 2 {
            return Err(Error::invalid("label smoothing needs at least two classes"));
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::invalid(format!("target id {bad} out of range for vocabulary {v}")));
        }
        let off = if v > 1 {
            smoothing / T::cast((v - 1) as f64)
        } else {
            T::zero()
        };
        let on = T::one() - smoothing;
        let mut probs = self.value(logits).data().to_vec();
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, target) in targets.iter().enumerate() {
            let row = &mut probs[r * v..(r + 1) * v];
            kernels::log_softmax_in_place(row);
            if let Some(t) = *target {
                let mut loss = -on * row[t];
                if off > T::zero() {
                    let others: T = row.iter().enumerate().filter(|&(j, _)| j != t).map(|(_, &lp)| lp).sum();
                    loss -= off * others;
                }
                total += loss;
                count += 1;
            }
            row.iter_mut().for_each(|lp| *lp = lp.exp());
        }
        let value = if count > 0 {
            total / T::cast(count as f64)
        } else {
            T::zero()
        };
        let rg = self.rg(logits);
        self.push(
            "cross_entropy",
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                probs,
                count,
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push("mean", Tensor::scalar(s / T::cast(n as f64)), Op::Mean(a), rg)
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q[N, d]`, `k[M, d]` and `v[M, d]` are already projected. Each segment
    /// is attended independently; with `causal` set, query `i` of a segment
    /// sees keys `0..=i` only. Query rows outside every segment stay zero.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[AttnSegment],
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let (n_q, d) = self.matrix_dims("attention", q)?;
        let (n_k, dk) = self.matrix_dims("attention", k)?;
        let (n_v, dv) = self.matrix_dims("attention", v)?;
        if dk != d || dv != d || n_v != n_k {
            return Err(Error::shape(
                "attention",
                format!("q [{n_q},{d}], k [{n_k},{dk}], v [{n_v},{dv}]"),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!("width {d} not divisible into {heads} heads")));
        }
        for s in segments {
            if s.q_start + s.q_len > n_q || s.k_start + s.k_len > n_k {
                return Err(Error::shape("attention", format!("segment {s:?} out of range")));
            }
            if s.q_len > 0 && s.k_len == 0 {
                return Err(Error::shape("attention", "queries with no keys"));
            }
            if causal && s.q_len > s.k_len {
                return Err(Error::shape("attention", "causal segment with more queries than keys"));
            }
        }
        let dh = d / heads;
        let scale = T::one() / T::cast(dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let max_k = segments.iter().map(|s| s.k_len).max().unwrap_or(0);
        let mut probs = vec![T::zero(); max_k];
        let mut out = vec![T::zero(); n_q * d];
        for s in segments {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..s.q_len {
                    let q_row = &qd[(s.q_start + i) * d + c0..(s.q_start + i) * d + c0 + dh];
                    let visible = if causal { i + 1 } else { s.k_len };
                    let p = &mut probs[..visible];
                    for (j, pj) in p.iter_mut().enumerate() {
                        let k_row = &kd[(s.k_start + j) * d + c0..(s.k_start + j) * d + c0 + dh];
                        *pj = dot(q_row, k_row) * scale;
                    }
                    kernels::softmax_in_place(p);
                    let o_row = &mut out[(s.q_start + i) * d + c0..(s.q_start + i) * d + c0 + dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let v_row = &vd[(s.k_start + j) * d + c0..(s.k_start + j) * d + c0 + dh];
                        for (o, &vv) in o_row.iter_mut().zip(v_row) {
                            *o += pj * vv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            "attention",
            Tensor::from_parts(vec![n_q, d], out),
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                causal,
            },
            rg,
        )
    }

    /// Row gather with zero fill: output row `r` is the concatenation of the
    /// rows `index[r*group .. (r+1)*group]` of `x`, a `None` entry giving a
    /// zero block. `group = 1` is an embedding lookup; larger groups build
    /// convolution windows.
    pub fn gather_rows(&mut self, x: Var, index: &[Option<usize>], group: usize) -> Result<Var> {
        let (n, d) = self.matrix_dims("gather_rows", x)?;
        if group == 0 || !index.len().is_multiple_of(group) {
            return Err(Error::shape(
                "gather_rows",
                format!("{} indices not divisible into groups of {group}", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().flatten().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of range for {n} rows")));
        }
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); index.len() * d];
        for (slot, idx) in index.iter().enumerate() {
            if let Some(i) = *idx {
                out[slot * d..(slot + 1) * d].copy_from_slice(&xs[i * d..(i + 1) * d]);
            }
        }
        let rows = index.len() / group;
        let rg = self.rg(x);
        self.push(
            "gather_rows",
            Tensor::from_parts(vec![rows, group * d], out),
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            rg,
        )
    }

    /// Copies `numel(shape)` consecutive values of `x` starting at `offset`.
    pub fn slice(&mut self, x: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let src = self.value(x).data();
        if offset + n > src.len() {
            return Err(Error::shape(
                "slice",
                format!("range {offset}..{} of {} values", offset + n, src.len()),
            ));
        }
        let out = src[offset..offset + n].to_vec();
        let rg = self.rg(x);
        self.push("slice", Tensor::from_parts(shape.to_vec(), out), Op::Slice { x, offset }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(x)),
            ));
        }
        let out = self.value(x).data().to_vec();
        let rg = self.rg(x);
        self.push("reshape", Tensor::from_parts(shape.to_vec(), out), Op::Reshape(x), rg)
    }

    /// Reverse pass from a scalar `loss`. Every node that requires a gradient
    /// and is reachable from `loss` receives one; everything else reads as
    /// zero through [`Gradients::get`].
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes[..=loss.0].iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::matmul_nt_into(g, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::matmul_tn_into(self.value(*a).data(), g, gb, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(o, &x)| *o += x);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, &x)| *o += x);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(o, &x)| *o -= x);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let bv = self.value(*b).data();
                    for ((o, &x), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let av = self.value(*a).data();
                    for ((o, &x), &y) in gb.iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                }
            }
            Op::AddRow(x, b) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
                }
                let d = self.value(*x).cols();
                if let Some(gb) = self.acc(grads, *b) {
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, &v)| *o += v * *c);
                }
            }
            Op::Gelu(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let xs = self.value(*a).data();
                    for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(xs) {
                        *o += gv * kernels::gelu_grad(x);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.value(*x).cols();
                let gv = self.value(*gain).data();
                if let Some(gg) = self.acc(grads, *gain) {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for grow in g.chunks(d) {
                        gb.iter_mut().zip(grow).for_each(|(o, &v)| *o += v);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let dn = T::cast(d as f64);
                    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..d {
                            let dh = grow[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hrow[j];
                        }
                        let k = inv_std[r] / dn;
                        for j in 0..d {
                            let dh = grow[j] * gv[j];
                            gx[r * d + j] += k * (dn * dh - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let d = node.value.cols();
                    let y = node.value.data();
                    for ((orow, grow), yrow) in ga.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                        let s: T = grow.iter().zip(yrow).map(|(&gv, &yv)| gv * yv).sum();
                        for j in 0..d {
                            orow[j] += yrow[j] * (grow[j] - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let d = node.value.cols();
                    let y = node.value.data();
                    for ((orow, grow), yrow) in ga.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                        let s: T = grow.iter().copied().sum();
                        for j in 0..d {
                            orow[j] += grow[j] - yrow[j].exp() * s;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                if let Some(gl) = self.acc(grads, *logits) {
                    let v = self.value(*logits).cols();
                    let scale = g[0] / T::cast(*count as f64);
                    let off = if v > 1 {
                        *smoothing / T::cast((v - 1) as f64)
                    } else {
                        T::zero()
                    };
                    let on = T::one() - *smoothing;
                    for (r, target) in targets.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        let prow = &probs[r * v..(r + 1) * v];
                        let orow = &mut gl[r * v..(r + 1) * v];
                        for j in 0..v {
                            let q = if j == t { on } else { off };
                            orow[j] += scale * (prow[j] - q);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let s = g[0] / T::cast(ga.len() as f64);
                    ga.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                causal,
            } => self.attention_backward(*q, *k, *v, segments, *heads, *causal, g, grads),
            Op::Gather { x, index, .. } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let d = self.value(*x).cols();
                    for (slot, idx) in index.iter().enumerate() {
                        if let Some(i) = *idx {
                            let src = &g[slot * d..(slot + 1) * d];
                            gx[i * d..(i + 1) * d].iter_mut().zip(src).for_each(|(o, &v)| *o += v);
                        }
                    }
                }
            }
            Op::Slice { x, offset } => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx[*offset..*offset + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(o, &v)| *o += v);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
                }
            }
        }
    }

    /// Softmax weights are recomputed and every accumulation runs in `f64`;
    /// the `dP − Σ p·dP` cancellation otherwise costs most of the precision
    /// of small gradient entries in `f32`.
    fn attention_backward(&self, q: Var, k: Var, v: Var, segments: &[AttnSegment], heads: usize, causal: bool, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let d = self.value(q).cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let widen = |x: &[T]| x.iter().map(|v| v.as_f64()).collect::<Vec<f64>>();
        let qd = widen(self.value(q).data());
        let kd = widen(self.value(k).data());
        let vd = widen(self.value(v).data());
        let gd = widen(g);
        let mut gq = vec![0.0f64; qd.len()];
        let mut gk = vec![0.0f64; kd.len()];
        let mut gv = vec![0.0f64; vd.len()];
        let max_k = segments.iter().map(|s| s.k_len).max().unwrap_or(0);
        let mut p = vec![0.0f64; max_k];
        let mut dp = vec![0.0f64; max_k];
        for s in segments {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..s.q_len {
                    let qi = (s.q_start + i) * d + c0;
                    let q_row = &qd[qi..qi + dh];
                    let go = &gd[qi..qi + dh];
                    let visible = if causal { i + 1 } else { s.k_len };
                    for j in 0..visible {
                        let kj = (s.k_start + j) * d + c0;
                        p[j] = dot(q_row, &kd[kj..kj + dh]) * scale;
                    }
                    kernels::softmax_in_place(&mut p[..visible]);
                    let mut weighted = 0.0;
                    for j in 0..visible {
                        let vj = (s.k_start + j) * d + c0;
                        dp[j] = dot(go, &vd[vj..vj + dh]);
                        weighted += p[j] * dp[j];
                        gv[vj..vj + dh].iter_mut().zip(go).for_each(|(o, &x)| *o += p[j] * x);
                    }
                    for j in 0..visible {
                        let dsj = p[j] * (dp[j] - weighted) * scale;
                        let kj = (s.k_start + j) * d + c0;
                        for c in 0..dh {
                            gq[qi + c] += dsj * kd[kj + c];
                            gk[kj + c] += dsj * q_row[c];
                        }
                    }
                }
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(acc) = self.acc(grads, var) {
                acc.iter_mut().zip(&local).for_each(|(o, &x)| *o += T::cast(x));
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient buffer of `v`, or `None` if no gradient reached it.
    pub fn slice(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` as a tensor, zero-filled when `v` is off the path.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match (self.slice(v), self.shapes.get(v.0)) {
            (Some(g), Some(shape)) => Tensor::from_parts(shape.clone(), g.to_vec()),
            (None, Some(shape)) => Tensor::zeros(shape),
            _ => Tensor::zeros(&[0]),
        }
    }

    /// Squared L2 norm over the given variables.
    pub fn norm_sq(&self, vars: &[Var]) -> f64 {
        vars.iter()
            .filter_map(|&v| self.slice(v))
            .flat_map(|g| g.iter())
            .map(|x| x.as_f64() * x.as_f64())
            .sum()
    }
}
