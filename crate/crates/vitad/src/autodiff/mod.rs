//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Values live on the
//! tape and are addressed by [`Var`] handles; since a handle can only refer to
//! an earlier node, the node list is always in topological order and the
//! backward sweep is a single reverse scan.
//!
//! The tape is built per forward pass and thrown away afterwards. Calling
//! [`Tape::backward`] does not consume or mutate it, so repeated traversals
//! return identical gradients.

mod gradcheck;

pub use gradcheck::{grad_check, grad_check_multi};

use crate::tensor::kernels::{self, add_assign};
use crate::tensor::{Real, Tensor, TensorError, TensorResult};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Scale(Var, T),
    AddRowVector(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Gelu(Var),
    Relu(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    CosineDistanceRows { a: Var, b: Var, eps: T },
    Im2Col3x3 { x: Var, h: usize, w: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the seed with respect to a leaf created by
    /// [`Tape::param`]. `None` when the leaf did not influence the seed.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn shape_err<T>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> TensorError
where
    T: Real,
{
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn require_2d<T: Real>(op: &'static str, t: &Tensor<T>) -> TensorResult<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(TensorError::Contract(format!(
            "{op} expects a 2-D tensor, got {:?}",
            t.shape()
        ))),
    }
}

fn gelu_cdf<T: Real>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_pdf<T: Real>(x: T) -> T {
    T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt()) * (-(x * x) * T::lit(0.5)).exp()
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that does not receive gradients (inputs, frozen weights).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is collected by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> TensorResult<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> TensorResult<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(name, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> TensorResult<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push("scale", out, Op::Scale(x, s), &[x])
    }

    /// Adds a `[d]` vector to every trailing-dimension vector of `x`.
    pub fn add_row_vector(&mut self, x: Var, bias: Var) -> TensorResult<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let d = vx.cols();
        if vb.numel() != d {
            return Err(shape_err("add_row_vector", vx, vb));
        }
        let mut out = vx.clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            add_assign(row, vb.data());
        }
        self.push("add_row_vector", out, Op::AddRowVector(x, bias), &[x, bias])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `x · w + b` for a `[in, out]` weight and `[out]` bias.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> TensorResult<Var> {
        let y = self.matmul(x, weight)?;
        self.add_row_vector(y, bias)
    }

    pub fn transpose(&mut self, x: Var) -> TensorResult<Var> {
        let out = self.value(x).transpose()?;
        self.push("transpose", out, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> TensorResult<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> TensorResult<Var> {
        let vx = self.value(x);
        let (r, c) = require_2d("slice_cols", vx)?;
        if len == 0 || start + len > c {
            return Err(TensorError::Contract(format!(
                "slice_cols {start}..{} out of range for {c} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for row in vx.data().chunks_exact(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::new([r, len], data)?;
        self.push("slice_cols", out, Op::SliceCols { x, start }, &[x])
    }

    /// Concatenates 2-D tensors with equal row counts along the columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> TensorResult<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_cols of nothing".into()))?;
        let (r, _) = require_2d("concat_cols", self.value(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = require_2d("concat_cols", self.value(p))?;
            if pr != r {
                return Err(shape_err("concat_cols", self.value(*first), self.value(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for row in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[row * w..(row + 1) * w]);
            }
        }
        let out = Tensor::new([r, total], data)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Rows `start..start + len` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> TensorResult<Var> {
        let vx = self.value(x);
        let (r, c) = require_2d("slice_rows", vx)?;
        if len == 0 || start + len > r {
            return Err(TensorError::Contract(format!(
                "slice_rows {start}..{} out of range for {r} rows",
                start + len
            )));
        }
        let out = Tensor::new([len, c], vx.data()[start * c..(start + len) * c].to_vec())?;
        self.push("slice_rows", out, Op::SliceRows { x, start }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> TensorResult<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_rows of nothing".into()))?;
        let (_, c) = require_2d("concat_rows", self.value(*first))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pr, pc) = require_2d("concat_rows", self.value(p))?;
            if pc != c {
                return Err(shape_err("concat_rows", self.value(*first), self.value(p)));
            }
            rows += pr;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new([rows, c], data)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Normalizes every trailing-dimension vector to zero mean and unit
    /// variance (biased estimator), then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> TensorResult<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = vx.cols();
        if vg.numel() != d {
            return Err(shape_err("layer_norm", vx, vg));
        }
        if vb.numel() != d {
            return Err(shape_err("layer_norm", vx, vb));
        }
        if eps <= T::zero() {
            return Err(TensorError::Contract("layer_norm eps must be positive".into()));
        }
        let inv_d = T::one() / T::lit(d as f64);
        let mut xhat = Vec::with_capacity(vx.numel());
        let mut rstd = Vec::with_capacity(vx.rows());
        let mut out = Vec::with_capacity(vx.numel());
        for row in vx.data().chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * vg.data()[j] + vb.data()[j]);
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Softmax over the trailing dimension, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> TensorResult<Var> {
        let vx = self.value(x);
        let d = vx.cols();
        let mut out = vx.clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> TensorResult<Var> {
        let out = self.value(x).map(|v| v * gelu_cdf(v));
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> TensorResult<Var> {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push("relu", out, Op::Relu(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> TensorResult<Var> {
        let out = self.value(x).map(|v| v.abs());
        self.push("abs", out, Op::Abs(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> TensorResult<Var> {
        let total = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> TensorResult<Var> {
        let vx = self.value(x);
        let total: T = vx.data().iter().copied().sum();
        let mean = total / T::lit(vx.numel() as f64);
        self.push("mean", Tensor::scalar(mean), Op::Mean(x), &[x])
    }

    /// Cosine distance `1 − a·b / (‖a‖‖b‖ + eps)` between matching
    /// trailing-dimension vectors. Output has one entry per row.
    pub fn cosine_distance_rows(&mut self, a: Var, b: Var, eps: T) -> TensorResult<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("cosine_distance_rows", va, vb));
        }
        let d = va.cols();
        let out: Vec<T> = va
            .data()
            .chunks_exact(d)
            .zip(vb.data().chunks_exact(d))
            .map(|(ra, rb)| {
                let (dot, na, nb) = dot_norms(ra, rb);
                T::one() - dot / (na * nb + eps)
            })
            .collect();
        let out = Tensor::new([va.rows()], out)?;
        self.push("cosine_distance_rows", out, Op::CosineDistanceRows { a, b, eps }, &[a, b])
    }

    /// Gathers the 3×3 zero-padded neighbourhood of every token of an
    /// `[h·w, c]` grid into a `[h·w, 9c]` matrix, so that a 3×3 convolution
    /// becomes one matmul. Column layout is `(ky·3 + kx)·c + channel`.
    pub fn im2col_3x3(&mut self, x: Var, h: usize, w: usize) -> TensorResult<Var> {
        let vx = self.value(x);
        let (n, c) = require_2d("im2col_3x3", vx)?;
        if n != h * w {
            return Err(TensorError::Contract(format!(
                "im2col_3x3: {n} tokens do not form a {h}×{w} grid"
            )));
        }
        let mut out = vec![T::zero(); n * 9 * c];
        for_each_tap(h, w, |dst_tok, tap, src_tok| {
            let dst = dst_tok * 9 * c + tap * c;
            out[dst..dst + c].copy_from_slice(&vx.data()[src_tok * c..(src_tok + 1) * c]);
        });
        let out = Tensor::new([n, 9 * c], out)?;
        self.push("im2col_3x3", out, Op::Im2Col3x3 { x, h, w }, &[x])
    }

    /// Runs the backward sweep from a scalar `seed`.
    pub fn backward(&self, seed: Var) -> TensorResult<Gradients<T>> {
        let seed_value = self.value(seed);
        if !seed_value.is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward seed must be scalar, got shape {:?}",
                seed_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(seed.0 + 1, || None);
        grads[seed.0] = Some(vec![T::one()]);

        let mut leaf_grads: Vec<Option<Tensor<T>>> = Vec::new();
        leaf_grads.resize_with(self.nodes.len(), || None);

        for i in (0..=seed.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let mut acc = |var: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[var.0].requires_grad {
                return;
            }
            let buf = grads[var.0].get_or_insert_with(|| vec![T::zero(); self.nodes[var.0].value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_assign(ga, g));
                acc(*b, &mut |gb| add_assign(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_assign(ga, g));
                acc(*b, &mut |gb| {
                    for (d, &s) in gb.iter_mut().zip(g) {
                        *d = *d - s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(vb) {
                        *d = *d + s * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((d, &s), &x) in gb.iter_mut().zip(g).zip(va) {
                        *d = *d + s * x;
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |gx| {
                for (d, &v) in gx.iter_mut().zip(g) {
                    *d = *d + v * *s;
                }
            }),
            Op::AddRowVector(x, bias) => {
                acc(*x, &mut |gx| add_assign(gx, g));
                acc(*bias, &mut |gb| {
                    for row in g.chunks_exact(gb.len()) {
                        add_assign(gb, row);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                acc(*a, &mut |ga| kernels::matmul_nt(g, vb.data(), ga, m, n, k));
                acc(*b, &mut |gb| kernels::matmul_tn(va.data(), g, gb, k, m, n));
            }
            Op::Transpose(x) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[j * r + i] = gx[j * r + i] + g[i * c + j];
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |gx| add_assign(gx, g)),
            Op::SliceCols { x, start } => {
                let len = node.value.shape()[1];
                let c = self.value(*x).shape()[1];
                acc(*x, &mut |gx| {
                    for (dst, src) in gx.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                        add_assign(&mut dst[*start..*start + len], src);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    acc(p, &mut |gp| {
                        for (dst, src) in gp.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                            add_assign(dst, &src[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.shape()[1];
                acc(*x, &mut |gx| add_assign(&mut gx[start * c..start * c + g.len()], g));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    acc(p, &mut |gp| add_assign(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let vg = self.value(*gamma).data();
                let d = vg.len();
                acc(*beta, &mut |gb| {
                    for row in g.chunks_exact(d) {
                        add_assign(gb, row);
                    }
                });
                acc(*gamma, &mut |gg| {
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] = gg[j] + grow[j] * hrow[j];
                        }
                    }
                });
                let inv_d = T::one() / T::lit(d as f64);
                acc(*x, &mut |gx| {
                    for (r, ((dst, grow), hrow)) in gx
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(xhat.chunks_exact(d))
                        .enumerate()
                    {
                        let mut mean_gh = T::zero();
                        let mut mean_ghx = T::zero();
                        for j in 0..d {
                            let gh = grow[j] * vg[j];
                            mean_gh = mean_gh + gh;
                            mean_ghx = mean_ghx + gh * hrow[j];
                        }
                        mean_gh = mean_gh * inv_d;
                        mean_ghx = mean_ghx * inv_d;
                        for j in 0..d {
                            let gh = grow[j] * vg[j];
                            dst[j] = dst[j] + rstd[r] * (gh - mean_gh - hrow[j] * mean_ghx);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = node.value.cols();
                acc(*x, &mut |gx| {
                    for ((dst, grow), yrow) in gx.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(y.chunks_exact(d)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            dst[j] = dst[j] + yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for ((d, &s), &v) in gx.iter_mut().zip(g).zip(vx) {
                        *d = *d + s * (gelu_cdf(v) + v * gelu_pdf(v));
                    }
                });
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for ((d, &s), &v) in gx.iter_mut().zip(g).zip(vx) {
                        if v > T::zero() {
                            *d = *d + s;
                        }
                    }
                });
            }
            Op::Abs(x) => {
                let vx = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for ((d, &s), &v) in gx.iter_mut().zip(g).zip(vx) {
                        if v > T::zero() {
                            *d = *d + s;
                        } else if v < T::zero() {
                            *d = *d - s;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| {
                for d in gx.iter_mut() {
                    *d = *d + g[0];
                }
            }),
            Op::Mean(x) => acc(*x, &mut |gx| {
                let s = g[0] / T::lit(gx.len() as f64);
                for d in gx.iter_mut() {
                    *d = *d + s;
                }
            }),
            Op::CosineDistanceRows { a, b, eps } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let d = va.cols();
                // d/da [1 - s/D] with s = a·b, D = |a||b| + eps
                //   = -(b/D - s·|b|·a / (|a|·D²))
                let partial = |own: &[T], other: &[T], dst: &mut [T]| {
                    for (r, ((ro, rt), out)) in own
                        .chunks_exact(d)
                        .zip(other.chunks_exact(d))
                        .zip(dst.chunks_exact_mut(d))
                        .enumerate()
                    {
                        let (dot, n_own, n_other) = dot_norms(ro, rt);
                        let denom = n_own * n_other + *eps;
                        let radial = if n_own > T::zero() {
                            dot * n_other / (n_own * denom * denom)
                        } else {
                            T::zero()
                        };
                        for j in 0..d {
                            out[j] = out[j] - g[r] * (rt[j] / denom - radial * ro[j]);
                        }
                    }
                };
                acc(*a, &mut |ga| partial(va.data(), vb.data(), ga));
                acc(*b, &mut |gb| partial(vb.data(), va.data(), gb));
            }
            Op::Im2Col3x3 { x, h, w } => {
                let c = self.value(*x).cols();
                acc(*x, &mut |gx| {
                    for_each_tap(*h, *w, |dst_tok, tap, src_tok| {
                        let src = dst_tok * 9 * c + tap * c;
                        add_assign(&mut gx[src_tok * c..(src_tok + 1) * c], &g[src..src + c]);
                    });
                });
            }
        }
    }
}

fn dot_norms<T: Real>(a: &[T], b: &[T]) -> (T, T, T) {
    let (mut dot, mut aa, mut bb) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in a.iter().zip(b) {
        dot = dot + x * y;
        aa = aa + x * x;
        bb = bb + y * y;
    }
    (dot, aa.sqrt(), bb.sqrt())
}

/// Visits every in-bounds `(token, tap, neighbour)` triple of a 3×3 stencil.
fn for_each_tap(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize)) {
    for y in 0..h {
        for x in 0..w {
            for ky in 0..3 {
                for kx in 0..3 {
                    let (sy, sx) = (y + ky, x + kx);
                    if sy == 0 || sx == 0 || sy > h || sx > w {
                        continue;
                    }
                    f(y * w + x, ky * 3 + kx, (sy - 1) * w + (sx - 1));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests;
