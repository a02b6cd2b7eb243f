//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is already a topological
//! order and [`Graph::backward`] walks it once in reverse.

use crate::error::TensorError;
use crate::tensor::{self, inverse_axes, permute_data, Scalar, Tensor};

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Silu(Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<F> },
    Transpose(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, index: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
}

#[derive(Clone, Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// A computation tape over tensors of element type `F`.
#[derive(Debug, Default)]
pub struct Graph<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
    check_finite: bool,
}

/// Gradients of a scalar with respect to every node that requires one.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    /// Enable the debug mode that turns any non-finite forward output into an error.
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A differentiable leaf.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// A leaf without gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Result<Var, TensorError> {
        if self.check_finite && !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// Batched product of `[batch, m, k]` with `[batch, k, n]`, or with
    /// `[batch, n, k]` transposed when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (bs, m, k) = self.value(a).dims3("bmm")?;
        let (bs2, r, c) = self.value(b).dims3("bmm")?;
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        if bs != bs2 || k != kb {
            return Err(TensorError::Shape {
                op: "bmm",
                expected: vec![bs, m, k],
                got: self.shape(b).to_vec(),
            });
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![F::zero(); bs * m * n];
        for i in 0..bs {
            let ab = &av[i * m * k..(i + 1) * m * k];
            let bb = &bv[i * k * n..(i + 1) * k * n];
            let cb = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                small_nt(m, k, n, ab, bb, cb);
            } else {
                small_nn(m, k, n, ab, bb, cb);
            }
        }
        let out = Tensor::from_parts(vec![bs, m, n], out);
        self.push("bmm", out, Op::BatchMatMul { a, b, trans_b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).add(self.value(b))?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).sub(self.value(b))?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).mul(self.value(b))?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// `x[m, n] + row[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        let (_, n) = self.value(x).rows_cols();
        if self.value(row).numel() != n {
            return Err(TensorError::Shape {
                op: "add_row",
                expected: vec![n],
                got: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row).data().to_vec();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, &b) in chunk.iter_mut().zip(&r) {
                *o += b;
            }
        }
        self.push("add_row", out, Op::AddRow(x, row), &[x, row])
    }

    pub fn scale(&mut self, x: Var, s: F) -> Result<Var, TensorError> {
        let out = self.value(x).scale(s);
        self.push("scale", out, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: F) -> Result<Var, TensorError> {
        let out = self.value(x).map(|v| v + s);
        self.push("add_scalar", out, Op::AddScalar(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).map(|v| v * tensor::sigmoid(v));
        self.push("silu", out, Op::Silu(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x);
        let (_, c) = v.rows_cols();
        let out = Tensor::from_parts(v.shape().to_vec(), tensor::softmax_rows(v.data(), c));
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    /// Un-affined layer normalization over the last axis.
    pub fn layernorm(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x);
        let (_, c) = v.rows_cols();
        if c < 2 {
            return Err(TensorError::Contract("layernorm needs an axis extent of at least 2".into()));
        }
        let (y, inv_std) = tensor::layernorm_rows(v.data(), c, F::of(LAYERNORM_EPS));
        let out = Tensor::from_parts(v.shape().to_vec(), y);
        self.push("layernorm", out, Op::LayerNorm { x, inv_std }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).transpose()?;
        self.push("transpose", out, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(x).reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(x).permute(axes)?;
        self.push("permute", out, Op::Permute(x, axes.to_vec()), &[x])
    }

    /// Concatenate 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of nothing".into()))?;
        let (rows, _) = self.value(first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != rows {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    expected: vec![rows],
                    got: vec![r],
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::from_parts(vec![rows, total], out);
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let (rows, cols) = self.value(x).dims2("slice_cols")?;
        if start >= end || end > cols {
            return Err(TensorError::Contract(format!(
                "slice {start}..{end} outside {cols} columns"
            )));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * w);
        for i in 0..rows {
            out.extend_from_slice(&src[i * cols + start..i * cols + end]);
        }
        let out = Tensor::from_parts(vec![rows, w], out);
        self.push("slice_cols", out, Op::SliceCols { x, start }, &[x])
    }

    /// Rows of a 2-D tensor selected (with repetition) by `index`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var, TensorError> {
        let (rows, cols) = self.value(x).dims2("gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Contract(format!("row {bad} out of {rows}")));
        }
        if index.is_empty() {
            return Err(TensorError::Contract("gather of no rows".into()));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let out = Tensor::from_parts(vec![index.len(), cols], out);
        self.push(
            "gather_rows",
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / F::of(v.numel() as f64));
        self.push("mean", out, Op::Mean(x), &[x])
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        va.expect_same_shape(vb, "mse")?;
        let total: F = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let out = Tensor::scalar(total / F::of(va.numel() as f64));
        self.push("mse", out, Op::Mse(a, b), &[a, b])
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), F::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, t: Tensor<F>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(t.data()) {
                        *e += *d;
                    }
                }
                slot @ None => *slot = Some(t),
            }
        };
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if wants(*a) {
                    let mut da = vec![F::zero(); m * k];
                    tensor::gemm_nt(m, n, k, g.data(), self.value(*b).data(), F::zero(), &mut da);
                    acc(*a, Tensor::from_parts(vec![m, k], da));
                }
                if wants(*b) {
                    let mut db = vec![F::zero(); k * n];
                    tensor::gemm_tn(k, m, n, self.value(*a).data(), g.data(), F::zero(), &mut db);
                    acc(*b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let gd = g.data();
                if wants(*a) {
                    let mut da = vec![F::zero(); bs * m * k];
                    for i in 0..bs {
                        let gb = &gd[i * m * n..(i + 1) * m * n];
                        let bb = &bv[i * k * n..(i + 1) * k * n];
                        let out = &mut da[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            // a·bᵀ: da = g·b
                            small_nn(m, n, k, gb, bb, out);
                        } else {
                            // a·b: da = g·bᵀ
                            small_nt(m, n, k, gb, bb, out);
                        }
                    }
                    acc(*a, Tensor::from_parts(sa.clone(), da));
                }
                if wants(*b) {
                    let mut db = vec![F::zero(); bs * k * n];
                    for i in 0..bs {
                        let gb = &gd[i * m * n..(i + 1) * m * n];
                        let ab = &av[i * m * k..(i + 1) * m * k];
                        let out = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // db[n,k] = gᵀ·a
                            small_tn(n, m, k, gb, ab, out);
                        } else {
                            // db[k,n] = aᵀ·g
                            small_tn(k, m, n, ab, gb, out);
                        }
                    }
                    acc(*b, Tensor::from_parts(sb, db));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.mul(self.value(*b)).expect("shape checked in forward"));
                }
                if wants(*b) {
                    acc(*b, g.mul(self.value(*a)).expect("shape checked in forward"));
                }
            }
            Op::AddRow(x, row) => {
                acc(*x, g.clone());
                if wants(*row) {
                    let n = self.value(*row).numel();
                    let mut db = vec![F::zero(); n];
                    for chunk in g.data().chunks(n) {
                        for (d, &v) in db.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    acc(*row, Tensor::from_parts(self.shape(*row).to_vec(), db));
                }
            }
            Op::Scale(x, s) => acc(*x, g.scale(*s)),
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::Silu(x) => {
                let dx = g
                    .zip_map(self.value(*x), "silu", |gv, xv| {
                        let s = tensor::sigmoid(xv);
                        gv * s * (F::one() + xv * (F::one() - s))
                    })
                    .expect("same shape");
                acc(*x, dx);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let (_, c) = y.rows_cols();
                let mut dx = vec![F::zero(); y.numel()];
                for ((dr, yr), gr) in dx.chunks_mut(c).zip(y.data().chunks(c)).zip(g.data().chunks(c)) {
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                acc(*x, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let (_, c) = y.rows_cols();
                let n = F::of(c as f64);
                let mut dx = vec![F::zero(); y.numel()];
                for (r, ((dr, yr), gr)) in dx
                    .chunks_mut(c)
                    .zip(y.data().chunks(c))
                    .zip(g.data().chunks(c))
                    .enumerate()
                {
                    let mean_g = gr.iter().copied().sum::<F>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<F>() / n;
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = inv_std[r] * (gv - mean_g - yv * mean_gy);
                    }
                }
                acc(*x, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::Transpose(x) => acc(*x, g.transpose().expect("2-D")),
            Op::Reshape(x) => acc(*x, g.reshape(self.shape(*x)).expect("same numel")),
            Op::Permute(x, axes) => {
                let inv = inverse_axes(axes);
                let data = permute_data(g.data(), g.shape(), &inv);
                acc(*x, Tensor::from_parts(self.shape(*x).to_vec(), data));
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (g.shape()[0], g.shape()[1]);
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if wants(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            d.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                        }
                        acc(p, Tensor::from_parts(vec![rows, w], d));
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = (self.shape(*x)[0], self.shape(*x)[1]);
                let w = g.shape()[1];
                let mut d = vec![F::zero(); rows * cols];
                for i in 0..rows {
                    d[i * cols + start..i * cols + start + w].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                acc(*x, Tensor::from_parts(vec![rows, cols], d));
            }
            Op::GatherRows { x, index } => {
                let (rows, cols) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut d = vec![F::zero(); rows * cols];
                for (k, &i) in index.iter().enumerate() {
                    for (o, &v) in d[i * cols..(i + 1) * cols].iter_mut().zip(&g.data()[k * cols..(k + 1) * cols]) {
                        *o += v;
                    }
                }
                acc(*x, Tensor::from_parts(vec![rows, cols], d));
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                acc(*x, Tensor::full(self.shape(*x), gv));
            }
            Op::Mean(x) => {
                let n = F::of(self.value(*x).numel() as f64);
                acc(*x, Tensor::full(self.shape(*x), g.data()[0] / n));
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let k = F::of(2.0) * g.data()[0] / F::of(va.numel() as f64);
                let da = va.zip_map(vb, "mse", |x, y| k * (x - y)).expect("same shape");
                if wants(*b) {
                    acc(*b, da.map(|v| -v));
                }
                acc(*a, da);
            }
        }
    }
}

// Small dense kernels for per-set attention blocks, where gemm call overhead
// would dominate. Each overwrites `c`. Sums run in f64, so reordering the
// tokens of a set only changes the final rounding.

fn small_nn<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..k {
            let av = a[i * k + p].as_f64();
            for (s, &bv) in acc.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *s += av * bv.as_f64();
            }
        }
        for (cv, &s) in c[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *cv = F::of(s);
        }
    }
}

fn small_nt<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = F::of(arow.iter().zip(brow).map(|(&x, &y)| x.as_f64() * y.as_f64()).sum());
        }
    }
}

/// `c[m, n] = a[k, m]^T · b[k, n]`.
fn small_tn<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    let mut acc = vec![0.0f64; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i].as_f64();
            for (s, &bv) in acc[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *s += av * bv.as_f64();
            }
        }
    }
    for (cv, s) in c.iter_mut().zip(acc) {
        *cv = F::of(s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use crate::rng::NoiseRng;

    #[test]
    fn sum_and_dot_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let xx = g.mul(x, x).unwrap();
        let s = g.sum(xx).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn finite_check_mode() {
        let mut g = Graph::<f32>::new().with_finite_check(true);
        let x = g.param(Tensor::full(&[2], f32::MAX));
        assert!(matches!(g.add(x, x), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn shared_input_visited_once() {
        // y = x*x + x, dy/dx = 2x + 1
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let xx = g.mul(x, x).unwrap();
        let y = g.add(xx, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[7.0]);
    }

    fn check_op(name: &str, shapes: &[&[usize]], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let mut rng = NoiseRng::new(name.len() as u64 * 31 + 7);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rng.normal_tensor(s)).collect();
        let report: GradCheck = check_gradients(&inputs, 1e-3, |g, vars| {
            let out = f(g, vars);
            // Contract with a fixed random weighting so every output coordinate matters.
            let shape = g.shape(out).to_vec();
            let w = g.constant(NoiseRng::new(99).normal_tensor(&shape));
            let prod = g.mul(out, w).unwrap();
            g.sum(prod).unwrap()
        });
        assert!(report.passes(1e-4, 0.99), "{name}: {report:?}");
    }

    #[test]
    fn gradcheck_every_op() {
        check_op("matmul", &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1]).unwrap());
        check_op("bmm", &[&[2, 3, 4], &[2, 4, 5]], |g, v| g.bmm(v[0], v[1], false).unwrap());
        check_op("bmm_t", &[&[2, 3, 4], &[2, 5, 4]], |g, v| g.bmm(v[0], v[1], true).unwrap());
        check_op("add", &[&[3, 2], &[3, 2]], |g, v| g.add(v[0], v[1]).unwrap());
        check_op("sub", &[&[3, 2], &[3, 2]], |g, v| g.sub(v[0], v[1]).unwrap());
        check_op("mul", &[&[3, 2], &[3, 2]], |g, v| g.mul(v[0], v[1]).unwrap());
        check_op("add_row", &[&[3, 2], &[2]], |g, v| g.add_row(v[0], v[1]).unwrap());
        check_op("scale", &[&[4]], |g, v| g.scale(v[0], -1.7).unwrap());
        check_op("add_scalar", &[&[4]], |g, v| g.add_scalar(v[0], 0.3).unwrap());
        check_op("silu", &[&[3, 3]], |g, v| g.silu(v[0]).unwrap());
        check_op("softmax", &[&[3, 5]], |g, v| g.softmax(v[0]).unwrap());
        check_op("layernorm", &[&[4, 6]], |g, v| g.layernorm(v[0]).unwrap());
        check_op("transpose", &[&[3, 2]], |g, v| g.transpose(v[0]).unwrap());
        check_op("reshape", &[&[3, 4]], |g, v| g.reshape(v[0], &[2, 6]).unwrap());
        check_op("permute", &[&[2, 3, 4]], |g, v| g.permute(v[0], &[1, 2, 0]).unwrap());
        check_op("concat", &[&[3, 2], &[3, 4]], |g, v| g.concat_cols(&[v[0], v[1]]).unwrap());
        check_op("slice", &[&[3, 5]], |g, v| g.slice_cols(v[0], 1, 4).unwrap());
        check_op("gather", &[&[3, 2]], |g, v| g.gather_rows(v[0], &[2, 0, 2, 1]).unwrap());
        check_op("mean", &[&[3, 2]], |g, v| g.mean(v[0]).unwrap());
        check_op("mse", &[&[3, 2], &[3, 2]], |g, v| g.mse(v[0], v[1]).unwrap());
    }

    #[test]
    fn deterministic_forward() {
        let run = || {
            let mut rng = NoiseRng::new(4);
            let mut g = Graph::<f32>::new();
            let a = g.param(rng.normal_tensor(&[8, 8]));
            let b = g.param(rng.normal_tensor(&[8, 8]));
            let c = g.matmul(a, b).unwrap();
            let d = g.softmax(c).unwrap();
            g.value(d).clone()
        };
        let (x, y) = (run(), run());
        assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
