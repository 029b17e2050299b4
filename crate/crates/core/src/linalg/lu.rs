use super::Matrix;
use crate::error::{Error, Result};

/// LU factorization with partial pivoting, `P·A = L·U`, packed in one matrix.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: Matrix,
    perm: Vec<usize>,
}

impl Lu {
    /// Factors `a`; a pivot with `|u_jj| <= floor` is reported as singular.
    pub fn factor_with_floor(a: &Matrix, floor: f64) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::DimensionMismatch("lu needs a square matrix".into()));
        }
        if !a.is_finite() {
            return Err(Error::NonFinite);
        }
        let n = a.rows();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for j in 0..n {
            let p = (j..n)
                .max_by(|&x, &y| lu[(x, j)].abs().total_cmp(&lu[(y, j)].abs()))
                .unwrap_or(j);
            if lu[(p, j)].abs() <= floor {
                return Err(Error::Singular);
            }
            if p != j {
                perm.swap(p, j);
                for k in 0..n {
                    let t = lu[(p, k)];
                    lu[(p, k)] = lu[(j, k)];
                    lu[(j, k)] = t;
                }
            }
            let piv = lu[(j, j)];
            for i in j + 1..n {
                let f = lu[(i, j)] / piv;
                lu[(i, j)] = f;
                if f != 0.0 {
                    for k in j + 1..n {
                        lu[(i, k)] -= f * lu[(j, k)];
                    }
                }
            }
        }
        Ok(Lu { lu, perm })
    }

    /// Solves `A·X = B`.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.lu.rows();
        if b.rows() != n {
            return Err(Error::DimensionMismatch("rhs rows differ from lu".into()));
        }
        let mut x = Matrix::from_fn(n, b.cols(), |i, c| b[(self.perm[i], c)]);
        for c in 0..b.cols() {
            for i in 0..n {
                let mut s = x[(i, c)];
                for k in 0..i {
                    s -= self.lu[(i, k)] * x[(k, c)];
                }
                x[(i, c)] = s;
            }
            for i in (0..n).rev() {
                let mut s = x[(i, c)];
                for k in i + 1..n {
                    s -= self.lu[(i, k)] * x[(k, c)];
                }
                x[(i, c)] = s / self.lu[(i, i)];
            }
        }
        Ok(x)
    }
}
