// SPDX-License-Identifier: MIT OR Apache-2.0

//! Kernels that skip closed gates.
//!
//! After training settles only a few features fire per row, so products
//! with the gated activations are done as row-wise `axpy` over open entries.
//! Each kernel falls back to a dense matrix product above
//! [`SPARSE_DENSITY`].

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, NdFloat, Zip};

/// Open-entry fraction above which dense products are used.
pub const SPARSE_DENSITY: f64 = 0.15;

pub(crate) fn is_sparse(nnz: usize, rows: usize, cols: usize) -> bool {
    let total = rows * cols;
    total > 0 && (nnz as f64) < SPARSE_DENSITY * total as f64
}

/// `out += acts * w^T` where `w` is `d x F` and `acts` is `B x F`.
pub(crate) fn acts_times_wt<T: NdFloat>(
    acts: ArrayView2<'_, T>,
    w: ArrayView2<'_, T>,
    nnz: usize,
    out: &mut Array2<T>,
) {
    if !is_sparse(nnz, acts.nrows(), acts.ncols()) {
        general_mat_mul(T::one(), &acts, &w.t(), T::one(), out);
        return;
    }
    let wt = w.t().as_standard_layout().into_owned();
    Zip::from(out.rows_mut()).and(acts.rows()).for_each(|mut o, f| {
        for (i, &v) in f.iter().enumerate() {
            if v != T::zero() {
                o.scaled_add(v, &wt.row(i));
            }
        }
    });
}

/// `g^T x` for sparse `g` (`B x F`) and dense `x` (`B x d`), as `F x d`.
pub(crate) fn sparse_t_times_dense<T: NdFloat>(g: ArrayView2<'_, T>, x: ArrayView2<'_, T>, nnz: usize) -> Array2<T> {
    let mut out = Array2::<T>::zeros((g.ncols(), x.ncols()));
    if !is_sparse(nnz, g.nrows(), g.ncols()) {
        general_mat_mul(T::one(), &g.t(), &x, T::zero(), &mut out);
        return out;
    }
    for (g_row, x_row) in g.rows().into_iter().zip(x.rows()) {
        for (i, &v) in g_row.iter().enumerate() {
            if v != T::zero() {
                out.row_mut(i).scaled_add(v, &x_row);
            }
        }
    }
    out
}

pub(crate) fn count_nonzero<T: NdFloat>(m: ArrayView2<'_, T>) -> usize {
    m.iter().filter(|&&v| v != T::zero()).count()
}
