use super::Matrix;
use crate::error::{Error, Result};

/// Lower-triangular factor `L` with `C = L·Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    /// Factor `c`; fails on the first pivot `<= 0`.
    pub fn factor(c: &Matrix) -> Result<Self> {
        Self::factor_with_floor(c, 0.0)
    }

    /// Factor `c`, treating any squared pivot `<= floor` as failure.
    pub fn factor_with_floor(c: &Matrix, floor: f64) -> Result<Self> {
        if !c.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "cholesky needs a square matrix, got {}x{}",
                c.rows(),
                c.cols()
            )));
        }
        if !c.is_finite() {
            return Err(Error::NonFinite);
        }
        let n = c.rows();
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = c[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if d.is_nan() || d <= floor {
                return Err(Error::NotPositiveDefinite { row: j, pivot: d });
            }
            let ljj = d.sqrt();
            l[(j, j)] = ljj;
            for i in j + 1..n {
                let mut s = c[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(Cholesky { l })
    }

    pub fn l(&self) -> &Matrix {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    /// Solves `C·X = B`.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.dim();
        if b.rows() != n {
            return Err(Error::DimensionMismatch(format!(
                "rhs has {} rows, factor is {}x{}",
                b.rows(),
                n,
                n
            )));
        }
        let mut x = b.clone();
        for c in 0..b.cols() {
            // L y = b
            for i in 0..n {
                let mut s = x[(i, c)];
                for k in 0..i {
                    s -= self.l[(i, k)] * x[(k, c)];
                }
                x[(i, c)] = s / self.l[(i, i)];
            }
            // Lᵀ x = y
            for i in (0..n).rev() {
                let mut s = x[(i, c)];
                for k in i + 1..n {
                    s -= self.l[(k, i)] * x[(k, c)];
                }
                x[(i, c)] = s / self.l[(i, i)];
            }
        }
        Ok(x)
    }

    /// `M·C⁻¹`, computed as the transposed solve `C·Xᵀ = Mᵀ`.
    pub fn right_solve(&self, m: &Matrix) -> Result<Matrix> {
        Ok(self.solve(&m.transpose())?.transpose())
    }

    /// `M·L⁻¹`: each row `x` of the result satisfies `x·L = m`.
    pub fn right_solve_factor(&self, m: &Matrix) -> Result<Matrix> {
        let n = self.dim();
        if m.cols() != n {
            return Err(Error::DimensionMismatch(format!(
                "lhs has {} columns, factor is {}x{}",
                m.cols(),
                n,
                n
            )));
        }
        let mut x = m.clone();
        for r in 0..m.rows() {
            let row = x.row_mut(r);
            for j in (0..n).rev() {
                let mut s = row[j];
                for k in j + 1..n {
                    s -= row[k] * self.l[(k, j)];
                }
                row[j] = s / self.l[(j, j)];
            }
        }
        Ok(x)
    }
}

/// Solves `C·X = B` for symmetric positive definite `C`.
pub fn cholesky_solve(c: &Matrix, b: &Matrix) -> Result<Matrix> {
    Cholesky::factor(c)?.solve(b)
}
