//! Dense float64 kernels: Jacobi SVD, Cholesky, pivoted LU and covariance
//! accumulation.

mod cholesky;
mod lu;
mod matrix;
mod svd;

pub use cholesky::{cholesky_solve, Cholesky};
pub use lu::Lu;
pub use matrix::Matrix;
pub use svd::{singular_values, svd, svd_with, truncate, SvdFactors, SvdOptions};

use crate::error::{Error, Result};

/// Returns `acc + X·Xᵀ`. Only the lower triangle is computed; the upper is mirrored.
pub fn accumulate_covariance(acc: &Matrix, x: &Matrix) -> Result<Matrix> {
    let n = acc.rows();
    if !acc.is_square() || x.rows() != n {
        return Err(Error::DimensionMismatch(format!(
            "accumulator {}x{} with batch {}x{}",
            acc.rows(),
            acc.cols(),
            x.rows(),
            x.cols()
        )));
    }
    if x.cols() == 0 {
        return Err(Error::DimensionMismatch("batch has no columns".into()));
    }
    let mut out = acc.clone();
    for i in 0..n {
        let xi = x.row(i);
        for j in 0..=i {
            let xj = x.row(j);
            let dot: f64 = xi.iter().zip(xj).map(|(a, b)| a * b).sum();
            out[(i, j)] += dot;
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            out[(i, j)] = out[(j, i)];
        }
    }
    Ok(out)
}
