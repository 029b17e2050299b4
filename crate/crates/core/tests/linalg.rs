use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use vecforge_core::linalg::{accumulate_covariance, cholesky_solve, svd, truncate, Matrix};

fn gauss(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| r.sample(StandardNormal))
}

/// Cyclic Jacobi eigenvalues of a symmetric matrix, descending.
fn jacobi_eigenvalues(a: &Matrix) -> Vec<f64> {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// Gaussian elimination with partial pivoting on an augmented system.
fn gauss_solve(a: &Matrix, b: &Matrix) -> Matrix {
    let n = a.rows();
    let m = b.cols();
    let mut aug: Vec<Vec<f64>> = (0..n)
        .map(|i| a.row(i).iter().chain(b.row(i)).copied().collect())
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| aug[x][col].abs().total_cmp(&aug[y][col].abs()))
            .unwrap();
        aug.swap(col, piv);
        for r in col + 1..n {
            let f = aug[r][col] / aug[col][col];
            for c in col..n + m {
                aug[r][c] -= f * aug[col][c];
            }
        }
    }
    let mut x = Matrix::zeros(n, m);
    for k in 0..m {
        for i in (0..n).rev() {
            let mut s = aug[i][n + k];
            for j in i + 1..n {
                s -= aug[i][j] * x[(j, k)];
            }
            x[(i, k)] = s / aug[i][i];
        }
    }
    x
}

fn triple_loop(a: &Matrix, b: &Matrix) -> Matrix {
    let mut c = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            for k in 0..a.cols() {
                c[(i, j)] += a[(i, k)] * b[(k, j)];
            }
        }
    }
    c
}

#[test]
fn singular_values_match_eigen_oracle() {
    let a = gauss(5, 4, 17);
    let s = svd(&a).unwrap().s;
    let ev = jacobi_eigenvalues(&a.transpose().matmul(&a).unwrap());
    for (x, e) in s.iter().zip(&ev) {
        assert!((x - e.max(0.0).sqrt()).abs() < 1e-8, "{s:?} vs {ev:?}");
    }
}

#[test]
fn diagonal_truncation() {
    let f = svd(&Matrix::from_diag(&[3.0, 2.0, 1.0])).unwrap();
    let t = truncate(&f, 1).unwrap();
    assert!(t.max_abs_diff(&Matrix::from_diag(&[3.0, 0.0, 0.0])) < 1e-12);
    assert_eq!(truncate(&f, 0).unwrap(), Matrix::zeros(3, 3));
}

#[test]
fn cholesky_matches_gaussian_elimination() {
    let m = gauss(6, 6, 3);
    let c = m.transpose().matmul(&m).unwrap().add_diag(1.0);
    let b = gauss(6, 3, 4);
    let x = cholesky_solve(&c, &b).unwrap();
    assert!(x.max_abs_diff(&gauss_solve(&c, &b)) < 1e-8);
    assert!(c.matmul(&x).unwrap().sub(&b).unwrap().frobenius_norm() <= 1e-6 * b.frobenius_norm().max(1.0));
}

#[test]
fn cholesky_diagonal_example() {
    let c = Matrix::from_diag(&[2.0, 4.0]);
    let x = cholesky_solve(&c, &Matrix::from_rows(&[vec![2.0], vec![8.0]]).unwrap()).unwrap();
    assert!(x.max_abs_diff(&Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap()) < 1e-15);
}

#[test]
fn covariance_matches_triple_loop() {
    let x = gauss(3, 5, 9);
    let c = accumulate_covariance(&Matrix::zeros(3, 3), &x).unwrap();
    assert!(c.max_abs_diff(&triple_loop(&x, &x.transpose())) < 1e-12);
    let c2 = accumulate_covariance(&Matrix::zeros(2, 2), &Matrix::identity(2)).unwrap();
    assert_eq!(c2, Matrix::identity(2));
}

#[test]
fn matmul_matches_triple_loop() {
    let a = gauss(7, 5, 1);
    let b = gauss(5, 3, 2);
    assert!(a.matmul(&b).unwrap().max_abs_diff(&triple_loop(&a, &b)) < 1e-12);
}

fn matrix_strategy(max: usize) -> impl Strategy<Value = Matrix> {
    (1..=max, 1..=max, any::<u64>(), -6i32..=6).prop_map(|(m, n, seed, e)| gauss(m, n, seed).scale(10f64.powi(e)))
}

fn permutation(n: usize, seed: u64) -> Matrix {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        idx.swap(i, r.random_range(0..=i));
    }
    Matrix::from_fn(n, n, |i, j| f64::from(u8::from(idx[i] == j)))
}

proptest! {
    #[test]
    fn svd_contract(a in matrix_strategy(9)) {
        let f = svd(&a).unwrap();
        let k = a.rows().min(a.cols());
        prop_assert_eq!(f.s.len(), k);
        prop_assert!(f.s.windows(2).all(|w| w[0] >= w[1]) && f.s.iter().all(|&x| x >= 0.0));
        let utu = f.u.transpose().matmul(&f.u).unwrap();
        let vvt = f.vt.matmul(&f.vt.transpose()).unwrap();
        prop_assert!(utu.max_abs_diff(&Matrix::identity(k)) <= 1e-8);
        prop_assert!(vvt.max_abs_diff(&Matrix::identity(k)) <= 1e-8);
        let rec = truncate(&f, k).unwrap();
        prop_assert!(rec.sub(&a).unwrap().frobenius_norm() <= 1e-7 * a.frobenius_norm().max(1.0));
    }

    #[test]
    fn singular_values_are_permutation_invariant(a in matrix_strategy(8), p in any::<u64>(), q in any::<u64>()) {
        let pa = permutation(a.rows(), p).matmul(&a).unwrap().matmul(&permutation(a.cols(), q)).unwrap();
        let s1 = svd(&a).unwrap().s;
        let s2 = svd(&pa).unwrap().s;
        let scale = s1[0].max(1.0);
        for (x, y) in s1.iter().zip(&s2) {
            prop_assert!((x - y).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn covariance_satisfies_cauchy_schwarz(seed in any::<u64>(), n in 1usize..8, b in 1usize..12) {
        let c = accumulate_covariance(&Matrix::zeros(n, n), &gauss(n, b, seed)).unwrap();
        for i in 0..n {
            prop_assert!(c[(i, i)] >= 0.0);
            for j in 0..n {
                prop_assert_eq!(c[(i, j)], c[(j, i)]);
                prop_assert!(c[(i, j)].abs() <= (c[(i, i)] * c[(j, j)]).sqrt() + 1e-9);
            }
        }
    }

    #[test]
    fn cholesky_recovers_solution(seed in any::<u64>(), n in 1usize..8, logcond in 0.0f64..8.0) {
        // C = Q·diag·Qᵀ with eigenvalues spread over 10^logcond.
        let f = svd(&gauss(n, n, seed)).unwrap();
        let eig: Vec<f64> = (0..n)
            .map(|i| 10f64.powf(if n == 1 { 0.0 } else { -logcond * i as f64 / (n - 1) as f64 }))
            .collect();
        let c = f.u.scale_cols(&eig).matmul(&f.u.transpose()).unwrap();
        let c = Matrix::from_fn(n, n, |i, j| 0.5 * (c[(i, j)] + c[(j, i)]));
        let x0 = gauss(n, 2, seed ^ 1);
        let x = cholesky_solve(&c, &c.matmul(&x0).unwrap()).unwrap();
        prop_assert!(x.sub(&x0).unwrap().frobenius_norm() <= 1e-6 * x0.frobenius_norm());
    }
}
