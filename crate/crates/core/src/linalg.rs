//! Exact spectral norms through a dense symmetric eigensolve of the smaller
//! Gram matrix. Used where the power-iteration path must not check itself.

use nalgebra::DMatrix;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Largest singular value of a row-major `rows × cols` matrix.
pub fn exact_sigma(data: &[f64], rows: usize, cols: usize) -> f64 {
    debug_assert_eq!(data.len(), rows * cols);
    let a = DMatrix::from_row_slice(rows, cols, data);
    let gram = if rows <= cols {
        &a * a.transpose()
    } else {
        a.transpose() * &a
    };
    let top = gram
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(0.0_f64, f64::max);
    top.max(0.0).sqrt()
}

pub fn exact_sigma_matrix(m: &Tensor) -> Result<f64> {
    let (r, c) = m.dims2().map_err(|_| shape_err("exact_sigma needs a matrix"))?;
    Ok(exact_sigma(m.data(), r, c))
}

/// All singular values, descending.
pub fn singular_values(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let a = DMatrix::from_row_slice(rows, cols, data);
    let mut s: Vec<f64> = a.singular_values().iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}
