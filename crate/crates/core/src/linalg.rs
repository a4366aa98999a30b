//! Thin bridge to nalgebra's dense factorizations.

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};

use crate::error::{FedGraphError, Result};

fn to_na(a: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_na(a: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows(), a.ncols()), |(i, j)| a[(i, j)])
}

/// Solves `A X = B` for symmetric `A`: Cholesky first, pivoted LU if `A` is
/// not numerically positive definite.
pub(crate) fn solve_symmetric(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n {
        return Err(FedGraphError::dims(format!(
            "system matrix {:?}, right-hand side {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let am = to_na(a);
    let bm = to_na(b);
    let x = match am.clone().cholesky() {
        Some(ch) => ch.solve(&bm),
        None => am
            .lu()
            .solve(&bm)
            .ok_or_else(|| FedGraphError::SingularSystem(format!("{n}x{n} system has no unique solution")))?,
    };
    if x.iter().any(|v| !v.is_finite()) {
        return Err(FedGraphError::SingularSystem(format!(
            "{n}x{n} system produced non-finite solution"
        )));
    }
    Ok(from_na(&x))
}
