//! Batched matrix products with leading-axis broadcasting.

use rayon::prelude::*;

use super::{Result, Scalar, TensorError};

/// Resolved batch layout of `[..batch, m, k] x [..batch, k, n]`.
#[derive(Debug, Clone)]
pub(crate) struct MatmulLayout {
    pub out_shape: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// Matrix index into `a` for each output matrix.
    pub a_index: Vec<usize>,
    /// Matrix index into `b` for each output matrix.
    pub b_index: Vec<usize>,
    pub a_count: usize,
    pub b_count: usize,
}

impl MatmulLayout {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let mismatch = || TensorError::ShapeMismatch { op: "matmul", lhs: a.to_vec(), rhs: b.to_vec() };
        if a.len() < 2 || b.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let a_batch = &a[..a.len() - 2];
        let b_batch = &b[..b.len() - 2];
        let rank = a_batch.len().max(b_batch.len());
        let mut batch = vec![0; rank];
        for i in 0..rank {
            let ea = extent_from_right(a_batch, rank - 1 - i);
            let eb = extent_from_right(b_batch, rank - 1 - i);
            batch[i] = match (ea, eb) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return Err(mismatch()),
            };
        }
        let count: usize = batch.iter().product();
        let a_index = broadcast_index(&batch, a_batch);
        let b_index = broadcast_index(&batch, b_batch);
        let mut out_shape = batch;
        out_shape.push(m);
        out_shape.push(n);
        debug_assert_eq!(a_index.len(), count);
        Ok(MatmulLayout {
            out_shape,
            m,
            k,
            n,
            a_index,
            b_index,
            a_count: a_batch.iter().product(),
            b_count: b_batch.iter().product(),
        })
    }

    fn a_identity(&self) -> bool {
        self.a_count == self.a_index.len()
    }

    fn b_identity(&self) -> bool {
        self.b_count == self.b_index.len()
    }

    /// `b` is a single matrix and `a` is not broadcast: the whole product
    /// folds into one tall GEMM.
    fn folds(&self) -> bool {
        self.b_count == 1 && self.a_identity()
    }
}

fn extent_from_right(shape: &[usize], from_right: usize) -> usize {
    if from_right < shape.len() {
        shape[shape.len() - 1 - from_right]
    } else {
        1
    }
}

/// For each position of the broadcast batch, the flat matrix index into an
/// operand whose batch shape is `own`.
fn broadcast_index(batch: &[usize], own: &[usize]) -> Vec<usize> {
    let count: usize = batch.iter().product();
    let rank = batch.len();
    let offset = rank - own.len();
    let mut own_strides = vec![0usize; rank];
    let mut stride = 1;
    for i in (0..own.len()).rev() {
        own_strides[offset + i] = if own[i] == 1 { 0 } else { stride };
        stride *= own[i];
    }
    let mut out = Vec::with_capacity(count);
    let mut idx = vec![0usize; rank];
    for _ in 0..count {
        out.push(idx.iter().zip(&own_strides).map(|(i, s)| i * s).sum());
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < batch[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

/// Row-major `m×n` product of two row-major blocks, written into `c`.
/// `ta`/`tb` read the operand as transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::ONE } else { T::ZERO };
    // SAFETY: slice lengths checked above; strides describe the row-major
    // (or transposed) layout of those slices; c does not alias a or b.
    unsafe {
        T::gemm(m, k, n, T::ONE, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// Rows per task when a folded product is split across threads. Fixed so the
/// partition, and therefore every rounding, is independent of the pool size.
const FOLD_ROWS: usize = 512;

/// `c[rows×n] (+)= a[rows×k] · op(b)` with `a` row-major, split into row blocks.
#[allow(clippy::too_many_arguments)]
fn folded_rows<T: Scalar>(rows: usize, k: usize, n: usize, a: &[T], b: &[T], tb: bool, c: &mut [T], accumulate: bool) {
    if rows <= FOLD_ROWS || n == 0 {
        gemm_into(rows, k, n, a, false, b, tb, c, accumulate);
        return;
    }
    c[..rows * n].par_chunks_mut(FOLD_ROWS * n).enumerate().for_each(|(i, ci)| {
        let r = ci.len() / n;
        let start = i * FOLD_ROWS * k;
        gemm_into(r, k, n, &a[start..start + r * k], false, b, tb, ci, accumulate);
    });
}

pub(crate) fn matmul_forward<T: Scalar>(l: &MatmulLayout, a: &[T], b: &[T]) -> Vec<T> {
    let (m, k, n) = (l.m, l.k, l.n);
    let count = l.a_index.len();
    let mut out = vec![T::ZERO; count * m * n];
    if l.folds() {
        folded_rows(count * m, k, n, a, b, false, &mut out, false);
        return out;
    }
    if m * n == 0 {
        return out;
    }
    out.par_chunks_mut(m * n).enumerate().for_each(|(i, c)| {
        let ai = l.a_index[i] * m * k;
        let bi = l.b_index[i] * k * n;
        gemm_into(m, k, n, &a[ai..ai + m * k], false, &b[bi..bi + k * n], false, c, false);
    });
    out
}

/// Adjoint of `a`: `da[a_i] += dy_i · b_iᵀ`.
pub(crate) fn matmul_grad_a<T: Scalar>(l: &MatmulLayout, dy: &[T], b: &[T], da: &mut [T]) {
    let (m, k, n) = (l.m, l.k, l.n);
    if l.folds() {
        folded_rows(l.a_index.len() * m, n, k, dy, b, true, da, true);
        return;
    }
    if m * k == 0 {
        return;
    }
    if l.a_identity() {
        da.par_chunks_mut(m * k).enumerate().for_each(|(i, dai)| {
            let bi = l.b_index[i] * k * n;
            gemm_into(m, n, k, &dy[i * m * n..(i + 1) * m * n], false, &b[bi..bi + k * n], true, dai, true);
        });
        return;
    }
    for i in 0..l.a_index.len() {
        let ai = l.a_index[i] * m * k;
        let bi = l.b_index[i] * k * n;
        gemm_into(
            m,
            n,
            k,
            &dy[i * m * n..(i + 1) * m * n],
            false,
            &b[bi..bi + k * n],
            true,
            &mut da[ai..ai + m * k],
            true,
        );
    }
}

/// Adjoint of `b`: `db[b_i] += a_iᵀ · dy_i`.
pub(crate) fn matmul_grad_b<T: Scalar>(l: &MatmulLayout, a: &[T], dy: &[T], db: &mut [T]) {
    let (m, k, n) = (l.m, l.k, l.n);
    if l.folds() {
        gemm_into(k, l.a_index.len() * m, n, a, true, dy, false, db, true);
        return;
    }
    if k * n == 0 {
        return;
    }
    if l.b_identity() {
        db.par_chunks_mut(k * n).enumerate().for_each(|(i, dbi)| {
            let ai = l.a_index[i] * m * k;
            gemm_into(k, m, n, &a[ai..ai + m * k], true, &dy[i * m * n..(i + 1) * m * n], false, dbi, true);
        });
        return;
    }
    for i in 0..l.b_index.len() {
        let ai = l.a_index[i] * m * k;
        let bi = l.b_index[i] * k * n;
        gemm_into(
            k,
            m,
            n,
            &a[ai..ai + m * k],
            true,
            &dy[i * m * n..(i + 1) * m * n],
            false,
            &mut db[bi..bi + k * n],
            true,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_batch_layout() {
        let l = MatmulLayout::new(&[2, 1, 3, 4], &[5, 4, 6]).unwrap();
        assert_eq!(l.out_shape, vec![2, 5, 3, 6]);
        assert_eq!(l.a_index, vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
        assert_eq!(l.b_index, vec![0, 1, 2, 3, 4, 0, 1, 2, 3, 4]);
    }

    #[test]
    fn rejects_inner_mismatch_and_bad_batch() {
        assert!(MatmulLayout::new(&[2, 3], &[4, 2]).is_err());
        assert!(MatmulLayout::new(&[2, 2, 3], &[3, 3, 1]).is_err());
        assert!(MatmulLayout::new(&[3], &[3, 1]).is_err());
    }

    #[test]
    fn transposed_reads() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm_into(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm_into(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
