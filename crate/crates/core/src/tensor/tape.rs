use std::sync::Arc;

use super::gemm::{matmul_forward, matmul_grad_a, matmul_grad_b, MatmulLayout};
use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var, MatmulLayout),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    BroadcastTo(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Stack(Vec<Var>),
    Select(Var, usize),
    Gather(Var, Arc<Vec<Vec<usize>>>),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<T>, rstd: Vec<T> },
    Gelu(Var, Vec<T>),
    SumAll(Var),
    MeanAll(Var),
    MeanAxis(Var, usize),
    VarAxis(Var, usize),
    AttnProbs { q: Var, k: Var, heads: usize, scale: T },
    AttnApply { probs: Var, v: Var, heads: usize },
    CrossEntropy { logits: Var, labels: Arc<Vec<usize>> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Records the forward computation and replays adjoints in reverse order.
///
/// Node ids are assigned in execution order, so the record is already
/// topologically sorted; `backward` walks it once from the loss downwards.
/// Leaf gradients accumulate across `backward` calls until [`Tape::zero_grad`].
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(TensorError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() });
    }
    Ok(())
}

/// `rhs` must equal `lhs` or be a trailing suffix of it (broadcast over
/// leading axes only).
fn suffix_broadcast(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<usize> {
    if rhs.len() > lhs.len() || lhs[lhs.len() - rhs.len()..] != *rhs {
        return Err(TensorError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() });
    }
    Ok(rhs.iter().product::<usize>().max(1))
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(TensorError::BadAxis { op, axis, rank });
    }
    Ok(())
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `src` through `perm` (output axis `i` is input axis `perm[i]`).
fn permute_data<T: Scalar>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(src.len());
    if src.is_empty() {
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..src.len() {
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn phi<T: Scalar>(x: T) -> T {
    T::from_f64(0.5) * (T::ONE + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_value<T: Scalar>(x: T) -> T {
    x * phi(x)
}

/// Derivative of GELU given the already computed `cdf = Φ(x)`.
fn gelu_slope<T: Scalar>(x: T, cdf: T) -> T {
    let density = (-(x * x) * T::from_f64(0.5)).exp() * T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * density
}

fn softmax_rows<T: Scalar>(data: &mut [T], width: usize) {
    if width == 0 {
        return;
    }
    for row in data.chunks_exact_mut(width) {
        let max = row.iter().copied().fold(row[0], T::max);
        for v in row.iter_mut() {
            *v = (*v - max).exp();
        }
        let sum: T = row.iter().copied().sum();
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// `dx = y ⊙ (dy − Σ dy⊙y)` row by row, accumulated into `dx`.
fn softmax_rows_backward<T: Scalar>(y: &[T], dy: &[T], dx: &mut [T], width: usize) {
    if width == 0 {
        return;
    }
    for ((yr, dyr), dxr) in y.chunks_exact(width).zip(dy.chunks_exact(width)).zip(dx.chunks_exact_mut(width)) {
        let dot: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d += yv * (g - dot);
        }
    }
}

/// Splits a shape around `axis` into (outer, extent, inner).
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf. Parameters pass `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
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

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let layout = MatmulLayout::new(self.shape(a), self.shape(b))?;
        let out = matmul_forward(&layout, self.value(a).data(), self.value(b).data());
        let value = Tensor::new(layout.out_shape.clone(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b, layout), rg))
    }

    /// Elementwise sum; `b` may be a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let period = suffix_broadcast("add", self.shape(a), self.shape(b))?;
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_exact_mut(period.max(1)) {
            for (o, &v) in chunk.iter_mut().zip(bv) {
                *o += v;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let period = suffix_broadcast("sub", self.shape(a), self.shape(b))?;
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_exact_mut(period.max(1)) {
            for (o, &v) in chunk.iter_mut().zip(bv) {
                *o -= v;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product; `b` may be a trailing suffix of `a`'s shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let period = suffix_broadcast("mul", self.shape(a), self.shape(b))?;
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_exact_mut(period.max(1)) {
            for (o, &v) in chunk.iter_mut().zip(bv) {
                *o *= v;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let out = self.value(a).map(|v| v * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Repeats `a` over new leading axes; `a`'s shape must be a suffix of `shape`.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        suffix_broadcast("broadcast_to", shape, self.shape(a))?;
        let src = self.value(a).data();
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            data.extend_from_slice(src);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape.to_vec(), data)?, Op::BroadcastTo(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid(format!("permute: {perm:?} is not a permutation of rank {}", shape.len())));
        }
        let data = permute_data(self.value(a).data(), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Permute(a, perm.to_vec()), rg))
    }

    /// Swaps the two trailing axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(TensorError::BadAxis { op: "transpose", axis: 1, rank: r });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", axis, base.len())?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch { op: "concat", lhs: base, rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let (outer, _, inner) = around_axis(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let ext = self.shape(p)[axis];
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("stack of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        let mut data = Vec::with_capacity(base.iter().product::<usize>() * parts.len());
        for &p in parts {
            same_shape("stack", &base, self.shape(p))?;
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&base);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(shape, data)?, Op::Stack(parts.to_vec()), rg))
    }

    /// `a[index]` along the leading axis.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("select", 0, shape.len())?;
        if index >= shape[0] {
            return Err(TensorError::IndexOutOfRange { op: "select", index, extent: shape[0] });
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.value(a).data()[index * inner..(index + 1) * inner].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape[1..].to_vec(), data)?, Op::Select(a, index), rg))
    }

    /// Row gather along the token axis.
    ///
    /// `a` is either `[B, T, d]` (each batch item gathers from its own rows)
    /// or a shared table `[T, d]`; `index` holds one equally long row list per
    /// batch item. Output is `[B, k, d]`. The adjoint is a scatter-add.
    pub fn gather(&mut self, a: Var, index: Arc<Vec<Vec<usize>>>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (shared, rows, width) = match shape.len() {
            2 => (true, shape[0], shape[1]),
            3 if shape[0] == index.len() => (false, shape[1], shape[2]),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "gather",
                    lhs: shape,
                    rhs: vec![index.len()],
                })
            }
        };
        let k = index.first().map_or(0, Vec::len);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(index.len() * k * width);
        for (b, list) in index.iter().enumerate() {
            if list.len() != k {
                return Err(TensorError::Invalid(format!("gather: ragged index lists ({} vs {k})", list.len())));
            }
            let base = if shared { 0 } else { b * rows * width };
            for &r in list {
                if r >= rows {
                    return Err(TensorError::IndexOutOfRange { op: "gather", index: r, extent: rows });
                }
                data.extend_from_slice(&src[base + r * width..base + (r + 1) * width]);
            }
        }
        let rg = self.rg(&[a]);
        let out = Tensor::new(vec![index.len(), k, width], data)?;
        Ok(self.push(out, Op::Gather(a, index), rg))
    }

    /// Embedding-row lookup: a gather from a shared `[rows, d]` table.
    pub fn embedding(&mut self, table: Var, index: Arc<Vec<Vec<usize>>>) -> Result<Var> {
        if self.shape(table).len() != 2 {
            return Err(TensorError::Invalid(format!("embedding table must be rank 2, got {:?}", self.shape(table))));
        }
        self.gather(table, index)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let width = *shape.last().ok_or(TensorError::BadAxis { op: "softmax", axis: 0, rank: 0 })?;
        let mut out = self.value(a).clone();
        softmax_rows(out.data_mut(), width);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Standardizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().ok_or(TensorError::BadAxis { op: "layer_norm", axis: 0, rank: 0 })?;
        same_shape("layer_norm", &[width], self.shape(gain))?;
        same_shape("layer_norm", &[width], self.shape(bias))?;
        if eps <= 0.0 {
            return Err(TensorError::Invalid("layer_norm eps must be positive".into()));
        }
        let eps = T::from_f64(eps);
        let g = self.value(gain).data();
        let bv = self.value(bias).data();
        let rows = self.value(x).numel() / width.max(1);
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * width);
        let n = T::from_f64(width as f64);
        for row in self.value(x).rows() {
            let mu = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
            let r = T::ONE / (var + eps).sqrt();
            for (j, &v) in row.iter().enumerate() {
                out.push((v - mu) * r * g[j] + bv[j]);
            }
            mean.push(mu);
            rstd.push(r);
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gain, bias, mean, rstd }, rg))
    }

    /// GELU in its exact form `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let rg = self.rg(&[a]);
        let x = self.value(a);
        if !rg {
            let out = x.map(gelu_value);
            return self.push(out, Op::Gelu(a, Vec::new()), rg);
        }
        let cdf: Vec<T> = x.data().iter().map(|&v| phi(v)).collect();
        let data = x.data().iter().zip(&cdf).map(|(&v, &c)| v * c).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("gelu shape");
        self.push(out, Op::Gelu(a, cdf), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum::<T>() / T::from_f64(v.numel().max(1) as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("mean_axis", axis, shape.len())?;
        let (outer, ext, inner) = around_axis(&shape, axis);
        let src = self.value(a).data();
        let scale = T::ONE / T::from_f64(ext.max(1) as f64);
        let mut out = vec![T::ZERO; outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let row = &src[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        for v in &mut out {
            *v *= scale;
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MeanAxis(a, axis), rg))
    }

    /// Population variance over `axis`, which is removed from the shape.
    pub fn var_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("var_axis", axis, shape.len())?;
        let (outer, ext, inner) = around_axis(&shape, axis);
        let src = self.value(a).data();
        let n = T::from_f64(ext.max(1) as f64);
        let mut out = vec![T::ZERO; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| src[(o * ext + e) * inner + i];
                let mu = (0..ext).map(at).sum::<T>() / n;
                out[o * inner + i] = (0..ext).map(|e| (at(e) - mu) * (at(e) - mu)).sum::<T>() / n;
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::VarAxis(a, axis), rg))
    }

    /// Per-head attention weights `softmax(scale · q_h k_hᵀ)`.
    ///
    /// `q` is `[B, Lq, d]`, `k` is `[B, Lk, d]`; heads are contiguous
    /// column slices of width `d / heads`. Output is `[B, heads, Lq, Lk]`.
    pub fn attention_probs(&mut self, q: Var, k: Var, heads: usize, scale: f64) -> Result<Var> {
        let (qs, ks) = (self.shape(q).to_vec(), self.shape(k).to_vec());
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] || heads == 0 || qs[2] % heads != 0 {
            return Err(TensorError::ShapeMismatch { op: "attention_probs", lhs: qs, rhs: ks });
        }
        let (b, lq, d, lk) = (qs[0], qs[1], qs[2], ks[1]);
        let dh = d / heads;
        let scale = T::from_f64(scale);
        let mut out = vec![T::ZERO; b * heads * lq * lk];
        let (qd, kd) = (self.value(q).data(), self.value(k).data());
        for bi in 0..b {
            for h in 0..heads {
                let s = &mut out[(bi * heads + h) * lq * lk..(bi * heads + h + 1) * lq * lk];
                // SAFETY: strided views stay within the [lq, d] / [lk, d]
                // blocks of batch item bi; s is a distinct output buffer.
                unsafe {
                    T::gemm(
                        lq,
                        dh,
                        lk,
                        scale,
                        qd.as_ptr().add(bi * lq * d + h * dh),
                        d as isize,
                        1,
                        kd.as_ptr().add(bi * lk * d + h * dh),
                        1,
                        d as isize,
                        T::ZERO,
                        s.as_mut_ptr(),
                        lk as isize,
                        1,
                    );
                }
                softmax_rows(s, lk);
            }
        }
        let rg = self.rg(&[q, k]);
        let value = Tensor::new(vec![b, heads, lq, lk], out)?;
        Ok(self.push(value, Op::AttnProbs { q, k, heads, scale }, rg))
    }

    /// Applies `[B, heads, Lq, Lk]` weights to `v: [B, Lk, d]`, merging heads
    /// back into `[B, Lq, d]`.
    pub fn attention_apply(&mut self, probs: Var, v: Var) -> Result<Var> {
        let (ps, vs) = (self.shape(probs).to_vec(), self.shape(v).to_vec());
        if ps.len() != 4 || vs.len() != 3 || ps[0] != vs[0] || ps[3] != vs[1] || vs[2] % ps[1] != 0 {
            return Err(TensorError::ShapeMismatch { op: "attention_apply", lhs: ps, rhs: vs });
        }
        let (b, heads, lq, lk, d) = (ps[0], ps[1], ps[2], ps[3], vs[2]);
        let dh = d / heads;
        let mut out = vec![T::ZERO; b * lq * d];
        let (pd, vd) = (self.value(probs).data(), self.value(v).data());
        for bi in 0..b {
            for h in 0..heads {
                // SAFETY: probs block [lq, lk] and strided value/output views
                // of width dh stay inside batch item bi.
                unsafe {
                    T::gemm(
                        lq,
                        lk,
                        dh,
                        T::ONE,
                        pd.as_ptr().add((bi * heads + h) * lq * lk),
                        lk as isize,
                        1,
                        vd.as_ptr().add(bi * lk * d + h * dh),
                        d as isize,
                        1,
                        T::ZERO,
                        out.as_mut_ptr().add(bi * lq * d + h * dh),
                        d as isize,
                        1,
                    );
                }
            }
        }
        let rg = self.rg(&[probs, v]);
        let value = Tensor::new(vec![b, lq, d], out)?;
        Ok(self.push(value, Op::AttnApply { probs, v, heads }, rg))
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: Arc<Vec<usize>>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(TensorError::ShapeMismatch { op: "cross_entropy", lhs: shape, rhs: vec![labels.len()] });
        }
        let c = shape[1];
        let mut total = 0.0;
        for (row, &y) in self.value(logits).rows().zip(labels.iter()) {
            if y >= c {
                return Err(TensorError::IndexOutOfRange { op: "cross_entropy", index: y, extent: c });
            }
            let max = row.iter().copied().fold(row[0], T::max).to_f64();
            let lse = row.iter().map(|v| (v.to_f64() - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[y].to_f64();
        }
        let value = Tensor::scalar(T::from_f64(total / labels.len().max(1) as f64));
        let rg = self.rg(&[logits]);
        Ok(self.push(value, Op::CrossEntropy { logits, labels }, rg))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut adj: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::full(&shape, T::ONE));
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g)?,
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(id, &g, &mut adj)?;
        }
        Ok(())
    }

    /// Adds `src` into `v`'s adjoint, moving it in when the slot is still empty.
    fn accumulate(&self, adj: &mut [Option<Tensor<T>>], v: Var, src: &[T]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut adj[v.0] {
            Some(acc) => {
                for (d, &x) in acc.data_mut().iter_mut().zip(src) {
                    *d += x;
                }
            }
            slot @ None => {
                let shape = self.shape(v).to_vec();
                *slot = Some(Tensor::new(shape, src.to_vec()).expect("adjoint shape"));
            }
        }
    }

    fn slot<'a>(&self, adj: &'a mut [Option<Tensor<T>>], v: Var) -> Option<&'a mut Tensor<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.shape(v);
        Some(adj[v.0].get_or_insert_with(|| Tensor::zeros(shape)))
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, adj: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b, layout) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.slot(adj, *a) {
                    matmul_grad_a(layout, gd, bv, da.data_mut());
                }
                if let Some(db) = self.slot(adj, *b) {
                    matmul_grad_b(layout, av, gd, db.data_mut());
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[id].op, Op::Sub(..)) { -T::ONE } else { T::ONE };
                self.accumulate(adj, *a, gd);
                if let Some(db) = self.slot(adj, *b) {
                    let dbd = db.data_mut();
                    for chunk in gd.chunks_exact(dbd.len().max(1)) {
                        for (d, &v) in dbd.iter_mut().zip(chunk) {
                            *d += sign * v;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let period = bv.len().max(1);
                if let Some(da) = self.slot(adj, *a) {
                    for (dc, gc) in da.data_mut().chunks_exact_mut(period).zip(gd.chunks_exact(period)) {
                        for ((d, &v), &w) in dc.iter_mut().zip(gc).zip(bv) {
                            *d += v * w;
                        }
                    }
                }
                if let Some(db) = self.slot(adj, *b) {
                    let dbd = db.data_mut();
                    for (gc, ac) in gd.chunks_exact(period).zip(av.chunks_exact(period)) {
                        for ((d, &v), &x) in dbd.iter_mut().zip(gc).zip(ac) {
                            *d += v * x;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(da) = self.slot(adj, *a) {
                    for (d, &v) in da.data_mut().iter_mut().zip(gd) {
                        *d += v * *s;
                    }
                }
            }
            Op::BroadcastTo(a) => {
                if let Some(da) = self.slot(adj, *a) {
                    let dd = da.data_mut();
                    for chunk in gd.chunks_exact(dd.len().max(1)) {
                        for (d, &v) in dd.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Reshape(a) => self.accumulate(adj, *a, gd),
            Op::Permute(a, perm) => {
                if let Some(da) = self.slot(adj, *a) {
                    let back = permute_data(gd, g.shape(), &inverse_perm(perm));
                    for (d, v) in da.data_mut().iter_mut().zip(back) {
                        *d += v;
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = around_axis(g.shape(), *axis);
                let mut start = 0;
                for &p in parts {
                    let ext = self.shape(p)[*axis];
                    if let Some(dp) = self.slot(adj, p) {
                        let dd = dp.data_mut();
                        for o in 0..outer {
                            let src = &gd[(o * total + start) * inner..(o * total + start + ext) * inner];
                            for (d, &v) in dd[o * ext * inner..(o + 1) * ext * inner].iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    }
                    start += ext;
                }
            }
            Op::Stack(parts) => {
                let inner = gd.len() / parts.len().max(1);
                for (i, &p) in parts.iter().enumerate() {
                    self.accumulate(adj, p, &gd[i * inner..(i + 1) * inner]);
                }
            }
            Op::Select(a, index) => {
                if let Some(da) = self.slot(adj, *a) {
                    let inner = gd.len();
                    for (d, &v) in da.data_mut()[index * inner..(index + 1) * inner].iter_mut().zip(gd) {
                        *d += v;
                    }
                }
            }
            Op::Gather(a, index) => {
                if let Some(da) = self.slot(adj, *a) {
                    let shape = da.shape().to_vec();
                    let shared = shape.len() == 2;
                    let width = *shape.last().unwrap_or(&1);
                    let rows = shape[shape.len() - 2];
                    let dd = da.data_mut();
                    let mut src = gd.chunks_exact(width.max(1));
                    for (b, list) in index.iter().enumerate() {
                        let base = if shared { 0 } else { b * rows * width };
                        for &r in list {
                            let row = src.next().expect("gather adjoint row count");
                            for (d, &v) in dd[base + r * width..base + (r + 1) * width].iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(da) = self.slot(adj, *a) {
                    let width = *g.shape().last().unwrap_or(&1);
                    softmax_rows_backward(self.nodes[id].value.data(), gd, da.data_mut(), width);
                }
            }
            Op::LayerNorm { x, gain, bias, mean, rstd } => {
                let width = *g.shape().last().unwrap_or(&1);
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let n = T::from_f64(width as f64);
                if let Some(dgain) = self.slot(adj, *gain) {
                    let dg = dgain.data_mut();
                    for (r, (xr, gr)) in xv.chunks_exact(width).zip(gd.chunks_exact(width)).enumerate() {
                        for j in 0..width {
                            dg[j] += gr[j] * (xr[j] - mean[r]) * rstd[r];
                        }
                    }
                }
                if let Some(dbias) = self.slot(adj, *bias) {
                    let db = dbias.data_mut();
                    for gr in gd.chunks_exact(width) {
                        for j in 0..width {
                            db[j] += gr[j];
                        }
                    }
                }
                if let Some(dx) = self.slot(adj, *x) {
                    let dxd = dx.data_mut();
                    let mut dxhat = vec![T::ZERO; width];
                    for (r, (xr, gr)) in xv.chunks_exact(width).zip(gd.chunks_exact(width)).enumerate() {
                        let mut s1 = T::ZERO;
                        let mut s2 = T::ZERO;
                        for j in 0..width {
                            dxhat[j] = gr[j] * gv[j];
                            let xhat = (xr[j] - mean[r]) * rstd[r];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xhat;
                        }
                        let (m1, m2) = (s1 / n, s2 / n);
                        for j in 0..width {
                            let xhat = (xr[j] - mean[r]) * rstd[r];
                            dxd[r * width + j] += rstd[r] * (dxhat[j] - m1 - xhat * m2);
                        }
                    }
                }
            }
            Op::Gelu(a, cdf) => {
                if self.nodes[a.0].requires_grad {
                    let xv = self.value(*a).data();
                    let dx: Vec<T> = xv.iter().zip(cdf).zip(gd).map(|((&x, &c), &v)| v * gelu_slope(x, c)).collect();
                    self.accumulate(adj, *a, &dx);
                }
            }
            Op::SumAll(a) | Op::MeanAll(a) => {
                if let Some(da) = self.slot(adj, *a) {
                    let mut s = gd[0];
                    if matches!(self.nodes[id].op, Op::MeanAll(_)) {
                        s = s / T::from_f64(da.numel().max(1) as f64);
                    }
                    for d in da.data_mut() {
                        *d += s;
                    }
                }
            }
            Op::MeanAxis(a, axis) => {
                if let Some(da) = self.slot(adj, *a) {
                    let (outer, ext, inner) = around_axis(&da.shape().to_vec(), *axis);
                    let scale = T::ONE / T::from_f64(ext.max(1) as f64);
                    let dd = da.data_mut();
                    for o in 0..outer {
                        for e in 0..ext {
                            for i in 0..inner {
                                dd[(o * ext + e) * inner + i] += gd[o * inner + i] * scale;
                            }
                        }
                    }
                }
            }
            Op::VarAxis(a, axis) => {
                if let Some(da) = self.slot(adj, *a) {
                    let xv = self.value(*a).data();
                    let (outer, ext, inner) = around_axis(&da.shape().to_vec(), *axis);
                    let n = T::from_f64(ext.max(1) as f64);
                    let two = T::from_f64(2.0);
                    let dd = da.data_mut();
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |e: usize| xv[(o * ext + e) * inner + i];
                            let mu = (0..ext).map(at).sum::<T>() / n;
                            for e in 0..ext {
                                dd[(o * ext + e) * inner + i] += gd[o * inner + i] * two * (at(e) - mu) / n;
                            }
                        }
                    }
                }
            }
            Op::AttnProbs { q, k, heads, scale } => {
                let (qs, ks) = (self.shape(*q), self.shape(*k));
                let (b, lq, d, lk) = (qs[0], qs[1], qs[2], ks[1]);
                let dh = d / heads;
                let probs = self.nodes[id].value.data();
                let mut ds = vec![T::ZERO; lq * lk];
                let (qd, kd) = (self.value(*q).data(), self.value(*k).data());
                let mut dq = self.slot(adj, *q).map(|t| t.data_mut().as_mut_ptr());
                let mut dk = self.slot(adj, *k).map(|t| t.data_mut().as_mut_ptr());
                for bi in 0..b {
                    for h in 0..*heads {
                        let off = (bi * heads + h) * lq * lk;
                        ds.iter_mut().for_each(|v| *v = T::ZERO);
                        softmax_rows_backward(&probs[off..off + lq * lk], &gd[off..off + lq * lk], &mut ds, lk);
                        // SAFETY: dq/dk point at distinct adjoint buffers of
                        // shapes [b, lq, d] and [b, lk, d]; every view below is a
                        // dh-wide column block of batch item bi.
                        unsafe {
                            if let Some(dq) = dq.as_mut() {
                                T::gemm(
                                    lq,
                                    lk,
                                    dh,
                                    *scale,
                                    ds.as_ptr(),
                                    lk as isize,
                                    1,
                                    kd.as_ptr().add(bi * lk * d + h * dh),
                                    d as isize,
                                    1,
                                    T::ONE,
                                    dq.add(bi * lq * d + h * dh),
                                    d as isize,
                                    1,
                                );
                            }
                            if let Some(dk) = dk.as_mut() {
                                T::gemm(
                                    lk,
                                    lq,
                                    dh,
                                    *scale,
                                    ds.as_ptr(),
                                    1,
                                    lk as isize,
                                    qd.as_ptr().add(bi * lq * d + h * dh),
                                    d as isize,
                                    1,
                                    T::ONE,
                                    dk.add(bi * lk * d + h * dh),
                                    d as isize,
                                    1,
                                );
                            }
                        }
                    }
                }
            }
            Op::AttnApply { probs, v, heads } => {
                let (ps, vs) = (self.shape(*probs), self.shape(*v));
                let (b, lq, lk, d) = (ps[0], ps[2], ps[3], vs[2]);
                let dh = d / heads;
                let (pd, vd) = (self.value(*probs).data(), self.value(*v).data());
                let mut dp = self.slot(adj, *probs).map(|t| t.data_mut().as_mut_ptr());
                let mut dv = self.slot(adj, *v).map(|t| t.data_mut().as_mut_ptr());
                for bi in 0..b {
                    for h in 0..*heads {
                        let off = (bi * heads + h) * lq * lk;
                        // SAFETY: as in the forward pass; dp and dv are
                        // separate adjoint buffers.
                        unsafe {
                            if let Some(dp) = dp.as_mut() {
                                T::gemm(
                                    lq,
                                    dh,
                                    lk,
                                    T::ONE,
                                    gd.as_ptr().add(bi * lq * d + h * dh),
                                    d as isize,
                                    1,
                                    vd.as_ptr().add(bi * lk * d + h * dh),
                                    1,
                                    d as isize,
                                    T::ONE,
                                    dp.add(off),
                                    lk as isize,
                                    1,
                                );
                            }
                            if let Some(dv) = dv.as_mut() {
                                T::gemm(
                                    lk,
                                    lq,
                                    dh,
                                    T::ONE,
                                    pd.as_ptr().add(off),
                                    1,
                                    lk as isize,
                                    gd.as_ptr().add(bi * lq * d + h * dh),
                                    d as isize,
                                    1,
                                    T::ONE,
                                    dv.add(bi * lk * d + h * dh),
                                    d as isize,
                                    1,
                                );
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels } => {
                if let Some(dl) = self.slot(adj, *logits) {
                    let c = dl.shape()[1];
                    let scale = gd[0] / T::from_f64(labels.len().max(1) as f64);
                    let mut probs = self.value(*logits).data().to_vec();
                    softmax_rows(&mut probs, c);
                    let dd = dl.data_mut();
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let target = if j == y { T::ONE } else { T::ZERO };
                            dd[r * c + j] += scale * (probs[r * c + j] - target);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Plain (untaped) `a · b` on 2-D tensors, for analysis code.
    pub fn matmul_values(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let layout = MatmulLayout::new(a.shape(), b.shape())?;
        let out = matmul_forward(&layout, a.data(), b.data());
        Tensor::new(layout.out_shape, out)
    }
}
