//! Task vectors: plain differences, DARE drop-and-rescale, and purification
//! by truncated SVD of the activation-weighted product `W·C`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{boost_until, regularize_invertible, RegularizeOptions};
use crate::error::{Error, Result};
use crate::linalg::{svd, truncate, Cholesky, Lu, Matrix, SvdFactors};
use crate::rank_alloc::{LayerSpectrum, SpectralProfile};
use crate::rng::CounterRng;
use crate::tensor_store::{
    check_compat, Checkpoint, CovarianceEntry, CovarianceSet, Dtype, TaskVectorKind,
    TaskVectorSet, TensorRecord,
};

/// How a weight matrix is factored before rank truncation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decomposer {
    PlainSvd,
    ScaledSvd,
    WhitenedSvd,
    CoSvd,
    CoSvdRandom { seed: u64 },
    CoSvdCrosstask { task_id: String },
}

impl Decomposer {
    pub fn name(&self) -> &'static str {
        match self {
            Decomposer::PlainSvd => "plain_svd",
            Decomposer::ScaledSvd => "scaled_svd",
            Decomposer::WhitenedSvd => "whitened_svd",
            Decomposer::CoSvd => "co_svd",
            Decomposer::CoSvdRandom { .. } => "co_svd_random",
            Decomposer::CoSvdCrosstask { .. } => "co_svd_crosstask",
        }
    }

    pub fn needs_covariance(&self) -> bool {
        !matches!(self, Decomposer::PlainSvd | Decomposer::CoSvdRandom { .. })
    }
}

/// Result of purifying one linear layer.
#[derive(Debug, Clone)]
pub struct PurifiedLayer {
    pub layer_name: String,
    pub delta: TensorRecord,
    pub rank_used: usize,
    /// Σ_{j>r} σ_j² of the factored product.
    pub residual_energy: f64,
}

#[derive(Debug, Clone)]
pub struct Purified {
    pub vectors: TaskVectorSet,
    pub layers: Vec<PurifiedLayer>,
}

/// `W_FT − W_B` for every tensor of the base checkpoint.
pub fn plain_task_vector(ft: &Checkpoint, base: &Checkpoint) -> Result<TaskVectorSet> {
    ensure_compatible(ft, base)?;
    let mut layers = BTreeMap::new();
    for (name, b) in &base.tensors {
        let f = ft
            .tensors
            .get(name)
            .ok_or_else(|| Error::IncompatibleTopology(format!("{name} missing in fine-tuned")))?;
        layers.insert(name.clone(), difference(name, f, b)?);
    }
    Ok(TaskVectorSet {
        task_id: task_id_of(ft),
        kind: TaskVectorKind::Plain,
        layers,
        provenance: BTreeMap::new(),
    })
}

/// Zeroes each element with probability `p` and rescales survivors by `1/(1−p)`.
pub fn dare_task_vector(delta: &TaskVectorSet, p: f64, seed: u64) -> Result<TaskVectorSet> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidRate(p));
    }
    if delta.kind != TaskVectorKind::Plain {
        return Err(Error::InvariantViolation(format!(
            "drop-and-rescale expects plain deltas, got {}",
            delta.kind.as_str()
        )));
    }
    let scale = 1.0 / (1.0 - p);
    let mut layers = BTreeMap::new();
    for (name, t) in &delta.layers {
        let rng = CounterRng::new(seed, name);
        let vals: Vec<f64> = t
            .to_f64_vec()
            .into_iter()
            .enumerate()
            .map(|(i, v)| if rng.uniform(i as u64) < p { 0.0 } else { v * scale })
            .collect();
        layers.insert(name.clone(), t.with_values(vals)?);
    }
    let mut provenance = delta.provenance.clone();
    provenance.insert("dare_p".into(), p.to_string());
    provenance.insert("seed".into(), seed.to_string());
    Ok(TaskVectorSet {
        task_id: delta.task_id.clone(),
        kind: TaskVectorKind::Dare,
        layers,
        provenance,
    })
}

/// A weight matrix factored under some decomposer: the SVD of the transformed
/// product plus the map back to weight space.
#[derive(Debug, Clone)]
pub struct Factored {
    svd: SvdFactors,
    back: BackMap,
}

#[derive(Debug, Clone)]
enum BackMap {
    Identity,
    ScaleCols(Vec<f64>),
    Covariance(Cholesky),
    Factor(Cholesky),
    Transposed(Lu),
}

impl Factored {
    /// Singular values of the factored product, non-increasing.
    pub fn spectrum(&self) -> &[f64] {
        &self.svd.s
    }

    pub fn full_rank(&self) -> usize {
        self.svd.s.len()
    }

    /// Σ_{j>r} σ_j².
    pub fn residual_energy(&self, r: usize) -> f64 {
        self.svd.s.iter().skip(r).map(|v| v * v).sum()
    }

    /// Rank-`r` reconstruction mapped back to weight space.
    pub fn reconstruct(&self, r: usize) -> Result<Matrix> {
        let t = truncate(&self.svd, r)?;
        match &self.back {
            BackMap::Identity => Ok(t),
            BackMap::ScaleCols(inv) => Ok(t.scale_cols(inv)),
            BackMap::Covariance(ch) => ch.right_solve(&t),
            BackMap::Factor(ch) => ch.right_solve_factor(&t),
            BackMap::Transposed(lu) => Ok(lu.solve(&t.transpose())?.transpose()),
        }
    }
}

/// Factors `w` for the given decomposer:
/// plain `W`; scaled `W·D`; whitened `W·L` with `C = L·Lᵀ`; context-oriented
/// `W·C`; random `W·R` for a seeded uniform `R`.
pub fn factor_layer(
    w: &Matrix,
    cov: Option<&CovarianceEntry>,
    decomposer: &Decomposer,
    layer: &str,
) -> Result<Factored> {
    let n = w.cols();
    let spd = || -> Result<Matrix> {
        let e = cov.ok_or_else(|| Error::MissingCovariance(layer.to_string()))?;
        if e.matrix.shape() != (n, n) {
            return Err(Error::DimensionMismatch(format!(
                "{layer}: covariance {}x{} for weight with {n} inputs",
                e.matrix.rows(),
                e.matrix.cols()
            )));
        }
        Ok(regularize_invertible(&e.matrix, RegularizeOptions::default())?.0)
    };
    let (product, back) = match decomposer {
        Decomposer::PlainSvd => (w.clone(), BackMap::Identity),
        Decomposer::ScaledSvd => {
            let c = spd()?;
            let count = cov.map_or(1, |e| e.sample_count.max(1)) as f64;
            let d: Vec<f64> = c.diag().iter().map(|&v| (v / count).sqrt()).collect();
            let inv = d.iter().map(|v| 1.0 / v).collect();
            (w.scale_cols(&d), BackMap::ScaleCols(inv))
        }
        Decomposer::WhitenedSvd => {
            let ch = Cholesky::factor(&spd()?)?;
            (w.matmul(ch.l())?, BackMap::Factor(ch))
        }
        Decomposer::CoSvd | Decomposer::CoSvdCrosstask { .. } => {
            let c = spd()?;
            let ch = Cholesky::factor(&c)?;
            (w.matmul(&c)?, BackMap::Covariance(ch))
        }
        Decomposer::CoSvdRandom { seed } => {
            let rng = CounterRng::new(*seed, layer);
            let raw = Matrix::from_fn(n, n, |i, j| 2.0 * rng.uniform((i * n + j) as u64) - 1.0);
            let floor = |m: &Matrix| 16.0 * m.rows() as f64 * f64::EPSILON * m.max_abs();
            let (c, _) = boost_until(&raw, |m| {
                Lu::factor_with_floor(&m.transpose(), floor(m)).is_ok()
            })?;
            let lu = Lu::factor_with_floor(&c.transpose(), floor(&c))?;
            (w.matmul(&c)?, BackMap::Transposed(lu))
        }
    };
    Ok(Factored {
        svd: svd(&product)?,
        back,
    })
}

/// Rank-`r` approximation of `w` under the chosen decomposer, plus the full
/// singular spectrum of the factored product.
pub fn apply_decomposer(
    w: &Matrix,
    cov: Option<&CovarianceEntry>,
    decomposer: &Decomposer,
    r: usize,
    layer: &str,
) -> Result<(Matrix, Vec<f64>)> {
    let f = factor_layer(w, cov, decomposer, layer)?;
    Ok((f.reconstruct(r)?, f.svd.s))
}

/// Every linear layer of one fine-tuned model, factored once so spectra can
/// feed rank allocation before any truncation happens.
#[derive(Debug, Clone)]
pub struct FactoredModel {
    pub model_id: String,
    pub decomposer: Decomposer,
    pub layers: Vec<(String, Factored)>,
}

impl FactoredModel {
    pub fn profile(&self) -> SpectralProfile {
        SpectralProfile {
            model_id: self.model_id.clone(),
            layers: self
                .layers
                .iter()
                .map(|(name, f)| LayerSpectrum::new(name.clone(), f.spectrum().to_vec()))
                .collect(),
        }
    }

    /// Purified task vector: `W† − W_B` on linear layers, plain deltas elsewhere.
    pub fn purify(
        &self,
        ft: &Checkpoint,
        base: &Checkpoint,
        ranks: &BTreeMap<String, usize>,
    ) -> Result<Purified> {
        let mut vectors = plain_task_vector(ft, base)?;
        let layers: Result<Vec<PurifiedLayer>> = self
            .layers
            .par_iter()
            .map(|(name, f)| {
                let r = *ranks
                    .get(name)
                    .ok_or_else(|| Error::InvariantViolation(format!("no rank for layer {name}")))?;
                let wdag = f.reconstruct(r)?;
                let wb = base.matrix(name)?;
                let dtype = vectors.layers[name].dtype();
                Ok(PurifiedLayer {
                    layer_name: name.clone(),
                    delta: TensorRecord::from_matrix(&wdag.sub(&wb)?, dtype),
                    rank_used: r,
                    residual_energy: f.residual_energy(r),
                })
            })
            .collect();
        let layers = layers?;
        for l in &layers {
            vectors.layers.insert(l.layer_name.clone(), l.delta.clone());
        }
        vectors.kind = TaskVectorKind::Pave;
        vectors
            .provenance
            .insert("decomposer".into(), self.decomposer.name().into());
        vectors
            .provenance
            .insert("ranks".into(), serde_json::to_string(ranks).unwrap());
        Ok(Purified { vectors, layers })
    }
}

/// Factors every linear layer of `ft`. `covs` may be `None` only for
/// decomposers that do not read a covariance.
pub fn factor_model(
    ft: &Checkpoint,
    covs: Option<&CovarianceSet>,
    decomposer: &Decomposer,
) -> Result<FactoredModel> {
    if let (Decomposer::CoSvdCrosstask { task_id }, Some(c)) = (decomposer, covs) {
        if &c.task_id != task_id {
            return Err(Error::MissingCovariance(format!(
                "cross-task covariance for {task_id}, got {}",
                c.task_id
            )));
        }
    }
    let layers: Result<Vec<(String, Factored)>> = ft
        .linear_layers
        .par_iter()
        .map(|name| {
            let cov = if decomposer.needs_covariance() {
                let c = covs.ok_or_else(|| Error::MissingCovariance(name.clone()))?;
                Some(c.entry(name)?)
            } else {
                None
            };
            Ok((name.clone(), factor_layer(&ft.matrix(name)?, cov, decomposer, name)?))
        })
        .collect();
    Ok(FactoredModel {
        model_id: task_id_of(ft),
        decomposer: decomposer.clone(),
        layers: layers?,
    })
}

/// Purified task vector per linear layer: `W† − W_B` with `W†` the rank-`r`
/// decomposer reconstruction of `W_FT`. Other tensors carry plain deltas.
///
/// For `co_svd_crosstask`, `covs` must be the other task's set.
pub fn pave_purify(
    ft: &Checkpoint,
    base: &Checkpoint,
    covs: &CovarianceSet,
    ranks: &BTreeMap<String, usize>,
    decomposer: &Decomposer,
) -> Result<Purified> {
    ensure_compatible(ft, base)?;
    factor_model(ft, Some(covs), decomposer)?.purify(ft, base, ranks)
}

fn ensure_compatible(a: &Checkpoint, b: &Checkpoint) -> Result<()> {
    let report = check_compat(a, b);
    if report.is_compatible() {
        Ok(())
    } else {
        Err(Error::IncompatibleTopology(report.to_string()))
    }
}

fn task_id_of(ck: &Checkpoint) -> String {
    ck.metadata.get("task_id").cloned().unwrap_or_default()
}

fn difference(name: &str, f: &TensorRecord, b: &TensorRecord) -> Result<TensorRecord> {
    if f.shape() != b.shape() {
        return Err(Error::IncompatibleTopology(format!(
            "{name}: shape {:?} vs {:?}",
            f.shape(),
            b.shape()
        )));
    }
    let vals = f
        .to_f64_vec()
        .iter()
        .zip(b.to_f64_vec())
        .map(|(x, y)| x - y)
        .collect();
    let dtype = if f.dtype() == Dtype::F64 || b.dtype() == Dtype::F64 {
        Dtype::F64
    } else {
        Dtype::F32
    };
    match dtype {
        Dtype::F64 => TensorRecord::from_f64(f.shape().to_vec(), vals),
        Dtype::F32 => b.with_values(vals),
    }
}
