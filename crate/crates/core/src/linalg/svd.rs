use super::Matrix;
use crate::error::{Error, Result};

/// Thin SVD: `A = U·diag(S)·Vt` with `k = min(m, n)` components.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub vt: Matrix,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SvdOptions {
    /// Sweep cap. `None` means `100 * min(m, n)`.
    pub max_sweeps: Option<usize>,
}

pub fn svd(a: &Matrix) -> Result<SvdFactors> {
    svd_with(a, SvdOptions::default())
}

pub fn svd_with(a: &Matrix, opts: SvdOptions) -> Result<SvdFactors> {
    if !a.is_finite() {
        return Err(Error::NonFinite);
    }
    let (m, n) = a.shape();
    let cap = opts.max_sweeps.unwrap_or(100 * m.min(n).max(1));
    if m >= n {
        let mut f = jacobi_tall(a, cap)?;
        fix_signs(&mut f);
        Ok(f)
    } else {
        let t = jacobi_tall(&a.transpose(), cap)?;
        let mut f = SvdFactors {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        };
        fix_signs(&mut f);
        Ok(f)
    }
}

/// Singular values only.
pub fn singular_values(a: &Matrix) -> Result<Vec<f64>> {
    Ok(svd(a)?.s)
}

/// Rank-r reconstruction `Σ_{i<r} σ_i u_i v_iᵀ`.
pub fn truncate(f: &SvdFactors, r: usize) -> Result<Matrix> {
    if r > f.s.len() {
        return Err(Error::RankOutOfRange {
            rank: r,
            max: f.s.len(),
        });
    }
    let (m, n) = (f.u.rows(), f.vt.cols());
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let urow = f.u.row(i);
        let orow = out.row_mut(i);
        for k in 0..r {
            let a = urow[k] * f.s[k];
            if a == 0.0 {
                continue;
            }
            for (o, &v) in orow.iter_mut().zip(f.vt.row(k)) {
                *o += a * v;
            }
        }
    }
    Ok(out)
}

// One-sided (Hestenes) Jacobi on the columns of a tall matrix.
fn jacobi_tall(a: &Matrix, cap: usize) -> Result<SvdFactors> {
    let (m, n) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let tol = f64::EPSILON * (m.max(1) as f64);

    let mut converged = n < 2;
    for _ in 0..cap {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for i in 0..m {
                        al += cp[i] * cp[i];
                        be += cq[i] * cq[i];
                        ga += cp[i] * cq[i];
                    }
                    (al, be, ga)
                };
                if gamma == 0.0 || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= tol * (alpha.sqrt() * beta.sqrt()) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta.abs() > 1e150 {
                    0.5 / zeta
                } else {
                    zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::NoConvergence(cap));
    }

    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut pending = Vec::new();
    let mut s = Vec::with_capacity(n);
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        s.push(sigma);
        if sigma > f64::MIN_POSITIVE {
            u_cols.push(cols[j].iter().map(|x| x / sigma).collect());
        } else {
            u_cols.push(vec![0.0; m]);
            pending.push(k);
        }
    }
    complete_basis(&mut u_cols, &pending, m);

    let u = Matrix::from_fn(m, n, |i, k| u_cols[k][i]);
    let vt = Matrix::from_fn(n, n, |k, i| v[order[k]][i]);
    Ok(SvdFactors { u, s, vt })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

// Fill the listed (zero) columns with unit vectors orthogonal to all others.
fn complete_basis(cols: &mut [Vec<f64>], pending: &[usize], m: usize) {
    let mut e = 0;
    for &k in pending {
        while e < m {
            let mut cand = vec![0.0; m];
            cand[e] = 1.0;
            e += 1;
            for _ in 0..2 {
                for (j, c) in cols.iter().enumerate() {
                    if j == k || (pending.contains(&j) && c.iter().all(|&x| x == 0.0)) {
                        continue;
                    }
                    let d: f64 = c.iter().zip(&cand).map(|(a, b)| a * b).sum();
                    for (x, a) in cand.iter_mut().zip(c) {
                        *x -= d * a;
                    }
                }
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                cols[k] = cand.iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

// First nonzero entry of each U column is made non-negative.
fn fix_signs(f: &mut SvdFactors) {
    let (m, k) = f.u.shape();
    for j in 0..k {
        let first = (0..m).map(|i| f.u[(i, j)]).find(|&x| x != 0.0);
        if matches!(first, Some(x) if x < 0.0) {
            for i in 0..m {
                f.u[(i, j)] = -f.u[(i, j)];
            }
            for v in f.vt.row_mut(j) {
                *v = -*v;
            }
        }
    }
}
