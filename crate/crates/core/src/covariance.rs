//! Per-layer input covariances `C = X·Xᵀ` and their regularization to
//! invertibility.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{accumulate_covariance, Cholesky, Matrix};
use crate::tensor_store::{Container, CovarianceEntry, CovarianceSet};

/// Input activations of one layer; columns are samples.
#[derive(Debug, Clone)]
pub struct ActivationStream {
    pub layer_name: String,
    pub batches: Vec<Matrix>,
    pub source_task: String,
}

impl ActivationStream {
    pub fn sample_count(&self) -> usize {
        self.batches.iter().map(Matrix::cols).sum()
    }
}

pub fn build_covariance(stream: &ActivationStream) -> Result<CovarianceEntry> {
    let first = stream
        .batches
        .first()
        .ok_or_else(|| Error::EmptyStream(stream.layer_name.clone()))?;
    let n = first.rows();
    let mut acc = Matrix::zeros(n, n);
    let mut count = 0u64;
    for (i, b) in stream.batches.iter().enumerate() {
        if b.rows() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} batch {i} has {} rows, expected {n}",
                stream.layer_name,
                b.rows()
            )));
        }
        if b.cols() == 0 {
            continue;
        }
        acc = accumulate_covariance(&acc, b)?;
        count += b.cols() as u64;
    }
    if count == 0 {
        return Err(Error::EmptyStream(stream.layer_name.clone()));
    }
    Ok(CovarianceEntry {
        matrix: acc,
        sample_count: count,
        diag_boost: 0.0,
    })
}

/// Builds every layer's entry (in parallel) and regularizes each one.
pub fn build_covariance_set(
    task_id: &str,
    streams: &[ActivationStream],
    opts: RegularizeOptions,
) -> Result<CovarianceSet> {
    let entries: Result<Vec<(String, CovarianceEntry)>> = streams
        .par_iter()
        .map(|s| {
            let raw = build_covariance(s)?;
            Ok((s.layer_name.clone(), regularize_entry(&raw, opts)?))
        })
        .collect();
    Ok(CovarianceSet {
        task_id: task_id.to_string(),
        entries: entries?.into_iter().collect(),
    })
}

/// Collects `"<layer>.acts.<batch>"` tensors into one stream per listed layer,
/// batches ordered by numeric index.
pub fn streams_from_container(
    c: &Container,
    layers: &[String],
    source_task: &str,
) -> Result<Vec<ActivationStream>> {
    layers
        .iter()
        .map(|layer| {
            let prefix = format!("{layer}.acts.");
            let mut batches: BTreeMap<u64, Matrix> = BTreeMap::new();
            for (name, t) in &c.tensors {
                let Some(idx) = name.strip_prefix(&prefix) else {
                    continue;
                };
                let Ok(idx) = idx.parse::<u64>() else {
                    continue;
                };
                batches.insert(idx, t.to_matrix()?);
            }
            Ok(ActivationStream {
                layer_name: layer.clone(),
                batches: batches.into_values().collect(),
                source_task: source_task.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RegularizeOptions {
    /// Map an all-zero covariance to the identity instead of failing.
    pub identity_fallback: bool,
}

/// First ε of the boost schedule: `1e-6 · |trace| / n`, floored at 1e-12.
pub fn schedule_epsilon(c: &Matrix) -> f64 {
    let n = c.rows().max(1) as f64;
    (1e-6 * c.trace().abs() / n).max(1e-12)
}

/// The boost that follows `b` in `{0, ε, 2ε, 4ε, …}`.
pub fn next_boost(b: f64, eps: f64) -> f64 {
    if b == 0.0 {
        eps
    } else {
        2.0 * b
    }
}

/// Smallest squared Cholesky pivot accepted as nonsingular.
pub fn pivot_floor(c: &Matrix) -> f64 {
    let max_diag = c.diag().into_iter().fold(0.0f64, |m, v| m.max(v.abs()));
    16.0 * c.rows() as f64 * f64::EPSILON * max_diag
}

/// Whether `c` factors with every squared pivot above [`pivot_floor`].
pub fn factors_cleanly(c: &Matrix) -> bool {
    Cholesky::factor_with_floor(c, pivot_floor(c)).is_ok()
}

/// Walks the boost schedule until `accept(C + b·I)` holds.
pub fn boost_until(c: &Matrix, accept: impl Fn(&Matrix) -> bool) -> Result<(Matrix, f64)> {
    let eps = schedule_epsilon(c);
    let mut b = 0.0;
    // 1100 doublings exhaust the f64 exponent range.
    for _ in 0..1100 {
        let cand = if b == 0.0 { c.clone() } else { c.add_diag(b) };
        if !cand.is_finite() {
            break;
        }
        if accept(&cand) {
            return Ok((cand, b));
        }
        b = next_boost(b, eps);
    }
    Err(Error::NotPositiveDefinite {
        row: 0,
        pivot: f64::NAN,
    })
}

/// `C' = C + boost·I` for the smallest scheduled boost whose Cholesky
/// factorization succeeds with pivots above round-off level.
pub fn regularize_invertible(c: &Matrix, opts: RegularizeOptions) -> Result<(Matrix, f64)> {
    if !c.is_square() {
        return Err(Error::DimensionMismatch("covariance must be square".into()));
    }
    if !c.is_finite() {
        return Err(Error::NonFinite);
    }
    if c.rows() > 0 && c.trace() == 0.0 {
        if opts.identity_fallback {
            return Ok((c.add_diag(1.0), 1.0));
        }
        return Err(Error::Degenerate);
    }
    boost_until(c, factors_cleanly)
}

/// Regularizes an entry, accumulating the boost into `diag_boost`.
pub fn regularize_entry(e: &CovarianceEntry, opts: RegularizeOptions) -> Result<CovarianceEntry> {
    let (matrix, boost) = regularize_invertible(&e.matrix, opts)?;
    Ok(CovarianceEntry {
        matrix,
        sample_count: e.sample_count,
        diag_boost: e.diag_boost + boost,
    })
}
