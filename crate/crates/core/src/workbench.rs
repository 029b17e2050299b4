//! Synthetic testbed: two-layer rectifier networks whose fine-tuned variants
//! carry a planted low-rank task component plus isotropic noise.
//!
//! Each space (input, hidden, output) splits into a shared block followed by
//! one private block per task. The base is attenuated on private blocks, a
//! task's inputs live on the shared block plus the head of its own private
//! block, and the planted component routes the task's private input through
//! its private hidden block to its output directions.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{build_covariance_set, ActivationStream, RegularizeOptions};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::pipeline::merge_in_memory;
use crate::purify::{factor_model, Decomposer};
use crate::recipe::{default_gamma, MergeMethod, MergeRecipe, Purification, RecipeInput};
use crate::rng::{splitmix64, stream};
use crate::tensor_store::{Checkpoint, CovarianceSet, Dtype, TensorRecord};

pub const FC1: &str = "fc1";
pub const FC2: &str = "fc2";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationDistribution {
    pub subspace_dim: usize,
    pub anisotropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub task_id: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub planted_rank: usize,
    pub seed: u64,
    pub noise_scale: f64,
    pub activation_distribution: ActivationDistribution,
    /// Largest singular value of each planted layer.
    #[serde(default = "one")]
    pub planted_magnitude: f64,
}

fn one() -> f64 {
    1.0
}

/// Block layout shared by all tasks of a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub shared_input: usize,
    pub shared_hidden: usize,
    pub shared_output: usize,
    /// Base weights are multiplied by this on private coordinates.
    pub private_attenuation: f64,
    /// Input standard deviation multiplier on private coordinates.
    pub private_scale: f64,
    /// Isotropic input noise added to every sample.
    pub input_floor: f64,
    /// Randomly rotate the input and output spaces.
    pub rotate: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            shared_input: 24,
            shared_hidden: 32,
            shared_output: 4,
            private_attenuation: 0.01,
            private_scale: 3.0,
            input_floor: 0.05,
            rotate: true,
        }
    }
}

impl WorldConfig {
    /// No shared blocks and no attenuation: plain Gaussian base, each task
    /// owns an equal slice of every space.
    pub fn unstructured() -> Self {
        WorldConfig {
            shared_input: 0,
            shared_hidden: 0,
            shared_output: 0,
            private_attenuation: 1.0,
            private_scale: 1.0,
            input_floor: 0.05,
            rotate: true,
        }
    }
}

/// One task's input distribution and noise-free reference model.
#[derive(Debug, Clone)]
pub struct TaskWorld {
    pub spec: SyntheticTaskSpec,
    /// `input_dim × subspace_dim`, orthonormal columns.
    pub basis: Matrix,
    /// Standard deviation along each basis column.
    pub spectrum: Vec<f64>,
    pub floor: f64,
    pub reference: Checkpoint,
}

#[derive(Debug, Clone)]
pub struct Suite {
    pub base_seed: u64,
    pub world: WorldConfig,
    pub base: Checkpoint,
    pub finetuned: Vec<Checkpoint>,
    /// Planted delta per task and layer.
    pub ground_truth: Vec<BTreeMap<String, Matrix>>,
    pub tasks: Vec<TaskWorld>,
}

impl Suite {
    pub fn task_ids(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.spec.task_id.clone()).collect()
    }
}

/// Everything needed to regenerate a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteManifest {
    pub base_seed: u64,
    pub world: WorldConfig,
    pub specs: Vec<SyntheticTaskSpec>,
}

impl SuiteManifest {
    pub fn build(&self) -> Result<Suite> {
        synth_suite(&self.specs, self.base_seed, &self.world)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Schema(vec![e.to_string()]))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// The default task family: 32→48→8, planted rank 2, inputs on the shared
/// block plus two private dims.
pub fn default_specs(k: usize, suite_seed: u64, noise_scale: f64) -> Vec<SyntheticTaskSpec> {
    (0..k)
        .map(|i| SyntheticTaskSpec {
            task_id: format!("t{i}"),
            input_dim: 32,
            hidden_dim: 48,
            output_dim: 8,
            planted_rank: 2,
            seed: splitmix64(suite_seed.wrapping_mul(1000).wrapping_add(i as u64)),
            noise_scale,
            activation_distribution: ActivationDistribution {
                subspace_dim: 26,
                anisotropy: 2.0,
            },
            planted_magnitude: 1.0,
        })
        .collect()
}

pub const DEFAULT_NOISE_BAND: (f64, f64) = (0.02, 0.03);

/// Deterministic noise level for a suite seed, uniform over `band`.
pub fn noise_for_seed(seed: u64, band: (f64, f64)) -> f64 {
    let u: f64 = stream(seed, "noise-band").random();
    band.0 + (band.1 - band.0) * u
}

/// Default K = 4 suite for `seed` with the given noise.
pub fn default_suite(seed: u64, noise_scale: f64) -> Result<Suite> {
    synth_suite(&default_specs(4, seed, noise_scale), seed, &WorldConfig::default())
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Orthonormal basis of the column span (modified Gram-Schmidt).
fn orthonormal_columns(m: &Matrix) -> Matrix {
    let (rows, cols) = m.shape();
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for j in 0..cols {
        let mut v = m.column(j);
        for _ in 0..2 {
            for u in &q {
                let d: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(x, a)| *x -= d * a);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        q.push(v);
    }
    Matrix::from_fn(rows, cols, |i, j| q[j][i])
}

fn random_orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    orthonormal_columns(&gaussian(rows, cols, rng))
}

fn column_block(m: &Matrix, cols: &[usize]) -> Matrix {
    Matrix::from_fn(m.rows(), cols.len(), |i, j| m[(i, cols[j])])
}

fn geometric_spectrum(n: usize, anisotropy: f64) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|j| anisotropy.powf(-(j as f64) / (n - 1) as f64))
        .collect()
}

fn toy_checkpoint(w1: &Matrix, w2: &Matrix, task_id: Option<&str>) -> Checkpoint {
    let mut tensors = BTreeMap::new();
    tensors.insert(FC1.to_string(), TensorRecord::from_matrix(w1, Dtype::F64));
    tensors.insert(FC2.to_string(), TensorRecord::from_matrix(w2, Dtype::F64));
    let mut metadata = BTreeMap::new();
    if let Some(t) = task_id {
        metadata.insert("task_id".to_string(), t.to_string());
    }
    Checkpoint {
        tensors,
        linear_layers: vec![FC1.to_string(), FC2.to_string()],
        metadata,
    }
}

struct Blocks {
    shared: usize,
    private: usize,
}

impl Blocks {
    fn new(what: &str, dim: usize, shared: usize, k: usize) -> Result<Self> {
        if shared > dim {
            return Err(Error::DimensionMismatch(format!(
                "{what}: shared block {shared} exceeds dimension {dim}"
            )));
        }
        Ok(Blocks {
            shared,
            private: (dim - shared) / k,
        })
    }

    fn private_range(&self, t: usize) -> std::ops::Range<usize> {
        let start = self.shared + t * self.private;
        start..start + self.private
    }
}

fn validate_specs(specs: &[SyntheticTaskSpec]) -> Result<()> {
    let first = specs
        .first()
        .ok_or_else(|| Error::DimensionMismatch("a suite needs at least one task".into()))?;
    for s in specs {
        if (s.input_dim, s.hidden_dim, s.output_dim) != (first.input_dim, first.hidden_dim, first.output_dim) {
            return Err(Error::DimensionMismatch(format!(
                "task {} dims differ from task {}",
                s.task_id, first.task_id
            )));
        }
        if s.input_dim == 0 || s.hidden_dim == 0 || s.output_dim == 0 {
            return Err(Error::DimensionMismatch(format!("task {} has a zero dimension", s.task_id)));
        }
        let ad = &s.activation_distribution;
        if ad.subspace_dim == 0 || ad.subspace_dim > s.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "task {}: subspace_dim {} outside [1, {}]",
                s.task_id, ad.subspace_dim, s.input_dim
            )));
        }
        if !(ad.anisotropy >= 1.0 && ad.anisotropy.is_finite()) {
            return Err(Error::InvariantViolation(format!(
                "task {}: anisotropy {} below 1",
                s.task_id, ad.anisotropy
            )));
        }
        if !(s.noise_scale >= 0.0 && s.noise_scale.is_finite() && s.planted_magnitude.is_finite()) {
            return Err(Error::InvariantViolation(format!("task {}: bad noise or magnitude", s.task_id)));
        }
    }
    Ok(())
}

/// Builds the base, every fine-tuned model and their planted deltas.
pub fn synth_suite(specs: &[SyntheticTaskSpec], base_seed: u64, world: &WorldConfig) -> Result<Suite> {
    validate_specs(specs)?;
    let k = specs.len();
    let (din, dh, dout) = (specs[0].input_dim, specs[0].hidden_dim, specs[0].output_dim);
    let bi = Blocks::new("input", din, world.shared_input, k)?;
    let bh = Blocks::new("hidden", dh, world.shared_hidden, k)?;
    let bo = Blocks::new("output", dout, world.shared_output, k)?;

    let mut rng = stream(base_seed, "world");
    let (ri, ro) = if world.rotate {
        (random_orthonormal(din, din, &mut rng), random_orthonormal(dout, dout, &mut rng))
    } else {
        (Matrix::identity(din), Matrix::identity(dout))
    };
    let atten = |dim: usize, shared: usize| -> Vec<f64> {
        (0..dim)
            .map(|i| if i < shared { 1.0 } else { world.private_attenuation })
            .collect()
    };
    let (ai, ah, ao) = (atten(din, bi.shared), atten(dh, bh.shared), atten(dout, bo.shared));
    let g1 = gaussian(dh, din, &mut rng);
    let g2 = gaussian(dout, dh, &mut rng);
    let w1 = Matrix::from_fn(dh, din, |i, j| ah[i] * g1[(i, j)] / (din as f64).sqrt() * ai[j])
        .matmul(&ri.transpose())?;
    let w2 = ro.matmul(&Matrix::from_fn(dout, dh, |i, j| {
        ao[i] * g2[(i, j)] / (dh as f64).sqrt() * ah[j]
    }))?;
    let base = toy_checkpoint(&w1, &w2, None);

    let mut finetuned = Vec::with_capacity(k);
    let mut ground_truth = Vec::with_capacity(k);
    let mut tasks = Vec::with_capacity(k);
    for (t, spec) in specs.iter().enumerate() {
        let mut rng = stream(spec.seed, "task");
        let sd = spec.activation_distribution.subspace_dim;
        let used = sd.checked_sub(bi.shared).filter(|&u| u <= bi.private).ok_or_else(|| {
            Error::DimensionMismatch(format!(
                "task {}: subspace_dim {sd} must lie in [{}, {}]",
                spec.task_id,
                bi.shared,
                bi.shared + bi.private
            ))
        })?;
        let priv_in: Vec<usize> = bi.private_range(t).take(used).collect();
        let cols: Vec<usize> = (0..bi.shared).chain(priv_in.iter().copied()).collect();
        let basis = column_block(&ri, &cols);
        let mut spectrum = geometric_spectrum(sd, spec.activation_distribution.anisotropy);
        spectrum.shuffle(&mut rng);
        spectrum[bi.shared..].iter_mut().for_each(|s| *s *= world.private_scale);

        let kr = spec.planted_rank;
        let (p1, p2) = if kr == 0 {
            (Matrix::zeros(dh, din), Matrix::zeros(dout, dh))
        } else {
            if kr > used || kr > bh.private || kr > bo.private + bo.shared {
                return Err(Error::DimensionMismatch(format!(
                    "task {}: planted rank {kr} exceeds its private blocks (input {used}, hidden {}, output {}+{})",
                    spec.task_id, bh.private, bo.private, bo.shared
                )));
            }
            let sv: Vec<f64> = (0..kr)
                .map(|j| {
                    let f = if kr == 1 { 0.0 } else { j as f64 / (kr - 1) as f64 };
                    spec.planted_magnitude * (1.0 - 0.5 * f)
                })
                .collect();
            let hidden_block: Vec<usize> = bh.private_range(t).collect();
            let hi = column_block(&Matrix::identity(dh), &hidden_block);
            let ii = column_block(&ri, &priv_in);
            let a1 = hi.matmul(&random_orthonormal(bh.private, kr, &mut rng))?;
            let b1 = ii.matmul(&random_orthonormal(used, kr, &mut rng))?;
            let p1 = a1.scale_cols(&sv).matmul(&b1.transpose())?;
            let own_out: Vec<usize> = bo.private_range(t).collect();
            let mut oi = column_block(&ro, &own_out);
            if bo.shared > 0 {
                let extra = kr.saturating_sub(bo.private).max(1);
                let shared_cols: Vec<usize> = (0..bo.shared).collect();
                let mix = column_block(&ro, &shared_cols)
                    .matmul(&random_orthonormal(bo.shared, extra.min(bo.shared), &mut rng))?;
                oi = Matrix::hstack(&[&oi, &mix])?;
            }
            let oi = oi.columns(0, kr);
            let b2 = hi.matmul(&random_orthonormal(bh.private, kr, &mut rng))?;
            let p2 = oi.scale_cols(&sv).matmul(&b2.transpose())?;
            (p1, p2)
        };
        let ns = spec.noise_scale;
        let n1 = gaussian(dh, din, &mut rng).scale(ns);
        let n2 = gaussian(dout, dh, &mut rng).scale(ns);
        let r1 = w1.add(&p1)?;
        let r2 = w2.add(&p2)?;
        finetuned.push(toy_checkpoint(&r1.add(&n1)?, &r2.add(&n2)?, Some(&spec.task_id)));
        tasks.push(TaskWorld {
            spec: spec.clone(),
            basis,
            spectrum,
            floor: world.input_floor,
            reference: toy_checkpoint(&r1, &r2, Some(&spec.task_id)),
        });
        ground_truth.push(BTreeMap::from([(FC1.to_string(), p1), (FC2.to_string(), p2)]));
    }
    Ok(Suite {
        base_seed,
        world: world.clone(),
        base,
        finetuned,
        ground_truth,
        tasks,
    })
}

/// `n` inputs (as columns) from the task's distribution.
pub fn sample_inputs(task: &TaskWorld, n: usize, seed: u64) -> Matrix {
    let mut rng = stream(seed, &format!("inputs/{}", task.spec.task_id));
    let sd = task.basis.cols();
    let z = Matrix::from_fn(sd, n, |i, _| task.spectrum[i] * rng.sample::<f64, _>(StandardNormal));
    let noise = gaussian(task.basis.rows(), n, &mut rng).scale(task.floor);
    task.basis.matmul(&z).expect("basis shape").add(&noise).expect("same shape")
}

fn layer_pair(model: &Checkpoint, din: usize) -> Result<(Matrix, Matrix)> {
    let w1 = model.matrix(FC1)?;
    let w2 = model.matrix(FC2)?;
    if w1.cols() != din || w2.cols() != w1.rows() {
        return Err(Error::DimensionMismatch(format!(
            "model shapes {:?} and {:?} do not chain from input {din}",
            w1.shape(),
            w2.shape()
        )));
    }
    Ok((w1, w2))
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Outputs for inputs given as columns.
pub fn forward(model: &Checkpoint, x: &Matrix) -> Result<Matrix> {
    let (w1, w2) = layer_pair(model, x.rows())?;
    w2.matmul(&w1.matmul(x)?.map(relu))
}

/// Per-layer inputs of `model` on `n_samples` draws: raw inputs for `fc1`,
/// rectified hidden activations for `fc2`.
pub fn run_activations(
    model: &Checkpoint,
    task: &TaskWorld,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<ActivationStream>> {
    let (w1, _) = layer_pair(model, task.basis.rows())?;
    let x = sample_inputs(task, n_samples, seed);
    let h = w1.matmul(&x)?.map(relu);
    let src = task.spec.task_id.clone();
    Ok(vec![
        ActivationStream {
            layer_name: FC1.into(),
            batches: vec![x],
            source_task: src.clone(),
        },
        ActivationStream {
            layer_name: FC2.into(),
            batches: vec![h],
            source_task: src,
        },
    ])
}

fn argmax_cols(y: &Matrix) -> Vec<usize> {
    (0..y.cols())
        .map(|j| {
            let mut best = 0;
            for i in 1..y.rows() {
                if y[(i, j)] > y[(best, j)] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Fraction of inputs on which `weights` and the task's reference pick the
/// same output.
pub fn eval_model(weights: &Checkpoint, task: &TaskWorld, n_eval: usize, seed: u64) -> Result<f64> {
    if n_eval == 0 {
        return Err(Error::EmptyStream("evaluation needs at least one input".into()));
    }
    let x = sample_inputs(task, n_eval, seed);
    let got = argmax_cols(&forward(weights, &x)?);
    let want = argmax_cols(&forward(&task.reference, &x)?);
    let hits = got.iter().zip(&want).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / n_eval as f64)
}

/// Mean score of one model over every task of the suite.
pub fn suite_score(suite: &Suite, weights: &Checkpoint, n_eval: usize, seed: u64) -> Result<f64> {
    let scores: Result<Vec<f64>> = suite
        .tasks
        .par_iter()
        .map(|t| eval_model(weights, t, n_eval, seed))
        .collect();
    let scores = scores?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Regularized covariance of every task, measured on its own fine-tuned model.
pub fn task_covariances(suite: &Suite, n_samples: usize, seed: u64) -> Result<Vec<CovarianceSet>> {
    suite
        .tasks
        .par_iter()
        .zip(&suite.finetuned)
        .map(|(t, ft)| {
            let streams = run_activations(ft, t, n_samples, seed)?;
            build_covariance_set(&t.spec.task_id, &streams, RegularizeOptions::default())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fig3Row {
    pub decomposer: String,
    pub rank: usize,
    pub task: String,
    pub score: f64,
    pub seed: u64,
}

pub const FIG3_HEADER: &str = "decomposer,rank,task,score,seed";

impl Fig3Row {
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{}", self.decomposer, self.rank, self.task, self.score, self.seed)
    }
}

#[derive(Debug, Clone)]
pub struct Fig3Config {
    /// A `co_svd_crosstask` entry with an empty task id uses the next task of
    /// the suite (cyclically).
    pub decomposers: Vec<Decomposer>,
    pub n_cov: usize,
    pub n_eval: usize,
    pub cov_seed: u64,
    pub eval_seed: u64,
}

impl Default for Fig3Config {
    fn default() -> Self {
        Fig3Config {
            decomposers: vec![
                Decomposer::CoSvd,
                Decomposer::ScaledSvd,
                Decomposer::PlainSvd,
                Decomposer::CoSvdRandom { seed: 0 },
                Decomposer::CoSvdCrosstask { task_id: String::new() },
            ],
            n_cov: 1024,
            n_eval: 4000,
            cov_seed: 7,
            eval_seed: 100,
        }
    }
}

/// Per-layer rank for a grid value `r` measured against the widest layer:
/// `⌈r·R_l / R_max⌉`, capped at `R_l`.
pub fn scaled_rank(r: usize, full: usize, max_full: usize) -> usize {
    if max_full == 0 {
        return 0;
    }
    (r * full).div_ceil(max_full).min(full)
}

/// Half of every layer's full rank, i.e. grid value `R_max / 2`.
pub fn half_rank(suite: &Suite) -> usize {
    max_full_rank(suite) / 2
}

pub fn max_full_rank(suite: &Suite) -> usize {
    suite
        .base
        .linear_layers
        .iter()
        .map(|l| {
            let s = suite.base.tensors[l].shape();
            s[0].min(s[1])
        })
        .max()
        .unwrap_or(0)
}

/// Purifies each fine-tuned model on its own (no merging) with every
/// decomposer at every grid rank and scores it on its task.
pub fn figure3_experiment(suite: &Suite, ranks: &[usize], cfg: &Fig3Config) -> Result<Vec<Fig3Row>> {
    let covs = task_covariances(suite, cfg.n_cov, cfg.cov_seed)?;
    let k = suite.tasks.len();
    let rmax = max_full_rank(suite);
    let jobs: Vec<(usize, &Decomposer)> = (0..k)
        .flat_map(|i| cfg.decomposers.iter().map(move |d| (i, d)))
        .collect();
    let rows: Result<Vec<Vec<Fig3Row>>> = jobs
        .par_iter()
        .map(|&(i, dec)| {
            let (dec, cov) = match dec {
                Decomposer::CoSvdCrosstask { task_id } if task_id.is_empty() => {
                    let j = (i + 1) % k;
                    let other = suite.tasks[j].spec.task_id.clone();
                    (Decomposer::CoSvdCrosstask { task_id: other }, &covs[j])
                }
                Decomposer::CoSvdCrosstask { task_id } => {
                    let j = suite
                        .tasks
                        .iter()
                        .position(|t| &t.spec.task_id == task_id)
                        .ok_or_else(|| Error::MissingCovariance(task_id.clone()))?;
                    (dec.clone(), &covs[j])
                }
                _ => (dec.clone(), &covs[i]),
            };
            let ft = &suite.finetuned[i];
            let factored = factor_model(ft, Some(cov), &dec)?;
            ranks
                .iter()
                .map(|&r| {
                    let mut model = ft.clone();
                    for (name, f) in &factored.layers {
                        let rl = scaled_rank(r, f.full_rank(), rmax);
                        let w = f.reconstruct(rl)?;
                        model
                            .tensors
                            .insert(name.clone(), TensorRecord::from_matrix(&w, Dtype::F64));
                    }
                    Ok(Fig3Row {
                        decomposer: dec.name().to_string(),
                        rank: r,
                        task: suite.tasks[i].spec.task_id.clone(),
                        score: eval_model(&model, &suite.tasks[i], cfg.n_eval, cfg.eval_seed)?,
                        seed: suite.base_seed,
                    })
                })
                .collect()
        })
        .collect();
    Ok(rows?.into_iter().flatten().collect())
}

/// Mean score over tasks for one decomposer and grid rank.
pub fn fig3_mean(rows: &[Fig3Row], decomposer: &str, rank: usize) -> Option<f64> {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.decomposer == decomposer && r.rank == rank)
        .map(|r| r.score)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Debug, Clone)]
pub struct MergeExperiment {
    pub lambda: f64,
    pub rho: f64,
    pub gamma: f64,
    pub decomposer: Decomposer,
    pub n_cov: usize,
    pub n_eval: usize,
    pub cov_seed: u64,
    pub eval_seed: u64,
}

impl Default for MergeExperiment {
    fn default() -> Self {
        MergeExperiment {
            lambda: 0.9,
            rho: 7.0 / 8.0,
            gamma: default_gamma(7.0 / 8.0),
            decomposer: Decomposer::CoSvd,
            n_cov: 1024,
            n_eval: 10_000,
            cov_seed: 7,
            eval_seed: 100,
        }
    }
}

impl MergeExperiment {
    /// Task-arithmetic recipe over the suite's tasks; paths are placeholders
    /// since the inputs are held in memory.
    pub fn recipe(&self, suite: &Suite, purify: bool) -> MergeRecipe {
        MergeRecipe {
            method: MergeMethod::TaskArithmetic,
            lambda: self.lambda,
            ties_trim_keep: crate::recipe::DEFAULT_TRIM_KEEP,
            dare_p: None,
            purification: purify.then(|| Purification {
                decomposer: self.decomposer.clone(),
                rho: self.rho,
                gamma: self.gamma,
                exempt: vec![],
            }),
            inputs: suite
                .task_ids()
                .into_iter()
                .map(|id| RecipeInput {
                    checkpoint: format!("{id}.safetensors"),
                    covariance: Some(format!("{id}.cov.safetensors")),
                    task_id: id,
                })
                .collect(),
            base: "base.safetensors".into(),
            seed: 0,
        }
    }

    /// Mean suite score of the merged model, with or without purification.
    pub fn merged_score(&self, suite: &Suite, purify: bool) -> Result<f64> {
        let covs: Vec<Option<CovarianceSet>> = if purify {
            task_covariances(suite, self.n_cov, self.cov_seed)?
                .into_iter()
                .map(Some)
                .collect()
        } else {
            vec![None; suite.tasks.len()]
        };
        let run = merge_in_memory(&self.recipe(suite, purify), &suite.base, &suite.finetuned, &covs)?;
        suite_score(suite, &run.merged.weights, self.n_eval, self.eval_seed)
    }
}

/// Population variance.
pub fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n
}

/// Cross-seed variance of the purified merged score at each covariance
/// sample count, for one suite.
pub fn sample_size_variances(
    suite: &Suite,
    exp: &MergeExperiment,
    counts: &[usize],
    cov_seeds: &[u64],
) -> Result<Vec<f64>> {
    counts
        .iter()
        .map(|&n| {
            let scores: Result<Vec<f64>> = cov_seeds
                .par_iter()
                .map(|&s| {
                    let e = MergeExperiment {
                        n_cov: n,
                        cov_seed: s,
                        ..exp.clone()
                    };
                    e.merged_score(suite, true)
                })
                .collect();
            Ok(variance(&scores?))
        })
        .collect()
}

/// Number of adjacent increases in a sequence.
pub fn inversions(v: &[f64]) -> usize {
    v.windows(2).filter(|w| w[1] > w[0]).count()
}

/// `⟨a, b⟩ / (‖a‖‖b‖)`; 0 when either is zero.
pub fn cosine(a: &Matrix, b: &Matrix) -> f64 {
    let dot: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum();
    let n = a.frobenius_norm() * b.frobenius_norm();
    if n == 0.0 {
        0.0
    } else {
        dot / n
    }
}
