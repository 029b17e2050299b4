use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use vecforge_core::linalg::{svd, truncate, Matrix};
use vecforge_core::purify::{
    apply_decomposer, dare_task_vector, factor_layer, pave_purify, plain_task_vector, Decomposer,
};
use vecforge_core::tensor_store::{Checkpoint, CovarianceEntry, CovarianceSet, Dtype, TaskVectorKind, TensorRecord};
use vecforge_core::Error;

fn gauss(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| r.sample(StandardNormal))
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn outer(u: &[f64], v: &[f64]) -> Matrix {
    Matrix::from_fn(u.len(), v.len(), |i, j| u[i] * v[j])
}

fn ck(w: &Matrix, task: &str) -> Checkpoint {
    Checkpoint {
        tensors: [("fc".to_string(), TensorRecord::from_matrix(w, Dtype::F64))].into(),
        linear_layers: vec!["fc".into()],
        metadata: [("task_id".to_string(), task.to_string())].into(),
    }
}

fn cov_set(task: &str, c: Matrix, count: u64) -> CovarianceSet {
    CovarianceSet {
        task_id: task.into(),
        entries: [(
            "fc".to_string(),
            CovarianceEntry {
                matrix: c,
                sample_count: count,
                diag_boost: 0.0,
            },
        )]
        .into(),
    }
}

fn random_spd(n: usize, r: &mut ChaCha8Rng) -> Matrix {
    let m = gauss(n, 2 * n, r);
    m.matmul(&m.transpose()).unwrap()
}

fn cosine(a: &Matrix, b: &Matrix) -> f64 {
    let dot: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum();
    dot / (a.frobenius_norm() * b.frobenius_norm())
}

fn ranks(r: usize) -> BTreeMap<String, usize> {
    [("fc".to_string(), r)].into()
}

#[test]
fn plain_delta_matches_scalar_loop() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (gauss(3, 3, &mut r), gauss(3, 3, &mut r));
    let tv = plain_task_vector(&ck(&a, "t"), &ck(&b, "")).unwrap();
    let d = tv.layers["fc"].to_matrix().unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(d[(i, j)], a[(i, j)] - b[(i, j)]);
        }
    }
    let zero = plain_task_vector(&ck(&a, "t"), &ck(&Matrix::zeros(3, 3), "")).unwrap();
    assert_eq!(zero.layers["fc"].to_matrix().unwrap(), a);
}

#[test]
fn dare_mean_on_unit_entries() {
    let n = 100_000;
    let tv = plain_task_vector(
        &Checkpoint {
            tensors: [("w".to_string(), TensorRecord::from_f64(vec![n], vec![1.0; n]).unwrap())].into(),
            linear_layers: vec![],
            metadata: BTreeMap::new(),
        },
        &Checkpoint {
            tensors: [("w".to_string(), TensorRecord::from_f64(vec![n], vec![0.0; n]).unwrap())].into(),
            linear_layers: vec![],
            metadata: BTreeMap::new(),
        },
    )
    .unwrap();
    let d = dare_task_vector(&tv, 0.5, 3).unwrap();
    let mean = d.layers["w"].to_f64_vec().iter().sum::<f64>() / n as f64;
    assert!((0.98..=1.02).contains(&mean), "{mean}");
    assert_eq!(d, dare_task_vector(&tv, 0.5, 3).unwrap());
    assert_eq!(d.kind, TaskVectorKind::Dare);
    assert!(matches!(dare_task_vector(&tv, 1.0, 3), Err(Error::InvalidRate(_))));
}

#[test]
fn identity_covariance_is_plain_svd_exactly() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let w = gauss(6, 5, &mut r);
    let base = gauss(6, 5, &mut r);
    let covs = cov_set("t", Matrix::identity(5), 5);
    for rank in 0..=5 {
        let got = pave_purify(&ck(&w, "t"), &ck(&base, ""), &covs, &ranks(rank), &Decomposer::CoSvd).unwrap();
        let want = truncate(&svd(&w).unwrap(), rank).unwrap().sub(&base).unwrap();
        assert_eq!(got.vectors.layers["fc"].to_matrix().unwrap(), want, "rank {rank}");
    }
}

/// `W_FT = W_B + u·vᵀ` with a base that is large but blind to `v`, and inputs
/// concentrated on `v`.
fn planted(seed: u64) -> (Matrix, Matrix, Matrix, Matrix) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = (8, 6);
    let v = unit(gauss(n, 1, &mut r).into_vec());
    let u = unit(gauss(m, 1, &mut r).into_vec());
    // Base rows are projected off v.
    let g = gauss(m, n, &mut r).scale(3.0);
    let gv = g.apply(&v);
    let wb = g.sub(&outer(&gv, &v)).unwrap();
    let p = outer(&u, &v);
    let noise = gauss(m, n, &mut r).scale(0.01);
    let wft = wb.add(&p).unwrap().add(&noise).unwrap();
    let x: Matrix = Matrix::from_fn(n, 400, |_, _| 0.0);
    let mut x = x;
    for j in 0..400 {
        let a: f64 = r.sample(StandardNormal);
        for i in 0..n {
            let e: f64 = r.sample(StandardNormal);
            x[(i, j)] = 3.0 * a * v[i] + 0.05 * e;
        }
    }
    let c = x.matmul(&x.transpose()).unwrap();
    (wb, wft, p, c)
}

#[test]
fn planted_direction_is_recovered() {
    let (wb, wft, p, c) = planted(5);
    let covs = cov_set("t", c, 400);
    let pave = pave_purify(&ck(&wft, "t"), &ck(&wb, ""), &covs, &ranks(1), &Decomposer::CoSvd).unwrap();
    let dp = pave.vectors.layers["fc"].to_matrix().unwrap();
    let ds = truncate(&svd(&wft).unwrap(), 1).unwrap().sub(&wb).unwrap();
    assert!(cosine(&dp, &p) > cosine(&ds, &p), "{} vs {}", cosine(&dp, &p), cosine(&ds, &p));
}

#[test]
fn co_svd_beats_plain_on_planted_component() {
    let wins = (0..100)
        .filter(|&seed| {
            let (_, wft, p, c) = planted(seed);
            let e = CovarianceEntry {
                matrix: c,
                sample_count: 400,
                diag_boost: 0.0,
            };
            let (co, _) = apply_decomposer(&wft, Some(&e), &Decomposer::CoSvd, 1, "fc").unwrap();
            let (pl, _) = apply_decomposer(&wft, None, &Decomposer::PlainSvd, 1, "fc").unwrap();
            co.sub(&p).unwrap().frobenius_norm() < pl.sub(&p).unwrap().frobenius_norm()
        })
        .count();
    assert!(wins >= 90, "{wins}/100");
}

#[test]
fn crosstask_needs_matching_covariance() {
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let w = gauss(3, 3, &mut r);
    let covs = cov_set("b", random_spd(3, &mut r), 6);
    let dec = Decomposer::CoSvdCrosstask { task_id: "c".into() };
    let err = pave_purify(&ck(&w, "a"), &ck(&w, ""), &covs, &ranks(3), &dec);
    assert!(matches!(err, Err(Error::MissingCovariance(_))));
}

fn all_decomposers() -> Vec<Decomposer> {
    vec![
        Decomposer::PlainSvd,
        Decomposer::ScaledSvd,
        Decomposer::WhitenedSvd,
        Decomposer::CoSvd,
        Decomposer::CoSvdRandom { seed: 3 },
        Decomposer::CoSvdCrosstask { task_id: "t".into() },
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn full_rank_reproduces_weights(seed in any::<u64>(), m in 1usize..7, n in 1usize..7) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let w = gauss(m, n, &mut r);
        let e = CovarianceEntry { matrix: random_spd(n, &mut r), sample_count: 2 * n as u64, diag_boost: 0.0 };
        for d in all_decomposers() {
            let (wd, _) = apply_decomposer(&w, Some(&e), &d, m.min(n), "fc").unwrap();
            prop_assert!(wd.sub(&w).unwrap().frobenius_norm() <= 1e-5 * w.frobenius_norm(), "{:?}", d);
        }
    }

    #[test]
    fn scale_of_covariance_cancels(seed in any::<u64>(), rank in 0usize..5) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let w = gauss(6, 5, &mut r);
        let base = gauss(6, 5, &mut r);
        let c = random_spd(5, &mut r);
        let at = |alpha: f64| {
            pave_purify(&ck(&w, "t"), &ck(&base, ""), &cov_set("t", c.scale(alpha), 10), &ranks(rank), &Decomposer::CoSvd)
                .unwrap()
                .vectors
                .layers["fc"]
                .to_matrix()
                .unwrap()
        };
        let one = at(1.0);
        for alpha in [0.1, 10.0, 7.0] {
            let d = at(alpha).sub(&one).unwrap().frobenius_norm();
            prop_assert!(d <= 1e-6 * one.frobenius_norm());
        }
    }

    #[test]
    fn residual_energy_is_monotone(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let w = gauss(5, 4, &mut r);
        let e = CovarianceEntry { matrix: random_spd(4, &mut r), sample_count: 8, diag_boost: 0.0 };
        let f = factor_layer(&w, Some(&e), &Decomposer::CoSvd, "fc").unwrap();
        let total: f64 = f.spectrum().iter().map(|s| s * s).sum();
        for k in 0..f.full_rank() {
            prop_assert!(f.residual_energy(k + 1) <= f.residual_energy(k));
            let kept: f64 = f.spectrum()[..k].iter().map(|s| s * s).sum();
            prop_assert!((f.residual_energy(k) - (total - kept)).abs() <= 1e-6 * total.max(1e-300));
        }
    }
}
