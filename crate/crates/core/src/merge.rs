//! Merging rules over task-vector sets: average, task arithmetic, Ties and EMR.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::recipe::MergeRecipe;
use crate::tensor_store::{Checkpoint, Container, TaskVectorSet, TensorRecord};

/// EMR side outputs: the unified vector plus per-task masks and rescalers.
#[derive(Debug, Clone, PartialEq)]
pub struct EmrArtifacts {
    pub tasks: Vec<String>,
    /// τ_uni per tensor.
    pub unified: BTreeMap<String, Vec<f64>>,
    /// `masks[task][tensor]`.
    pub masks: BTreeMap<String, BTreeMap<String, Vec<bool>>>,
    /// `rescalers[task][tensor]`.
    pub rescalers: BTreeMap<String, BTreeMap<String, f64>>,
}

#[derive(Debug, Clone)]
pub struct MergedModel {
    pub weights: Checkpoint,
    pub emr: Option<EmrArtifacts>,
    pub recipe: Option<MergeRecipe>,
}

impl MergedModel {
    /// Task-specific weights `W_B + λ_i·M_i∘τ_uni` (EMR only).
    pub fn reconstruct(&self, base: &Checkpoint, task: &str) -> Result<Checkpoint> {
        let emr = self
            .emr
            .as_ref()
            .ok_or_else(|| Error::InvariantViolation("model was not merged with EMR".into()))?;
        emr.reconstruct(base, task)
    }
}

impl EmrArtifacts {
    pub fn reconstruct(&self, base: &Checkpoint, task: &str) -> Result<Checkpoint> {
        let masks = self
            .masks
            .get(task)
            .ok_or_else(|| Error::InvariantViolation(format!("unknown task {task}")))?;
        let lambdas = &self.rescalers[task];
        let mut out = base.clone();
        for (name, uni) in &self.unified {
            let b = base
                .tensors
                .get(name)
                .ok_or_else(|| Error::IncompatibleTopology(format!("{name} missing in base")))?;
            let (m, lam) = (&masks[name], lambdas[name]);
            let vals = b
                .to_f64_vec()
                .iter()
                .zip(uni)
                .zip(m)
                .map(|((w, u), &keep)| if keep { w + lam * u } else { *w })
                .collect();
            out.tensors.insert(name.clone(), b.with_values(vals)?);
        }
        Ok(out)
    }

    /// `"<tensor>.uni"`, `"<tensor>.mask.<task>"` and `"<task>.lambda"` (one
    /// rescaler per tensor, in lexicographic tensor order).
    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        for (name, u) in &self.unified {
            c.tensors.insert(
                format!("{name}.uni"),
                TensorRecord::from_f64(vec![u.len()], u.clone()).unwrap(),
            );
        }
        for (task, per) in &self.masks {
            for (name, m) in per {
                let vals = m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                c.tensors.insert(
                    format!("{name}.mask.{task}"),
                    TensorRecord::from_f32(vec![m.len()], vals).unwrap(),
                );
            }
        }
        for (task, per) in &self.rescalers {
            let v: Vec<f64> = per.values().copied().collect();
            c.tensors.insert(
                format!("{task}.lambda"),
                TensorRecord::from_f64(vec![v.len()], v).unwrap(),
            );
        }
        c.metadata.insert("kind".into(), "emr".into());
        c.metadata.insert("tasks".into(), serde_json::to_string(&self.tasks).unwrap());
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let bad = |m: String| Error::MalformedHeader(format!("emr artifacts: {m}"));
        let tasks: Vec<String> = c
            .metadata
            .get("tasks")
            .map(|s| serde_json::from_str(s))
            .transpose()
            .map_err(|e| bad(e.to_string()))?
            .ok_or_else(|| bad("missing task list".into()))?;
        let mut unified = BTreeMap::new();
        for (name, t) in &c.tensors {
            if let Some(layer) = name.strip_suffix(".uni") {
                unified.insert(layer.to_string(), t.to_f64_vec());
            }
        }
        let mut masks = BTreeMap::new();
        let mut rescalers = BTreeMap::new();
        for task in &tasks {
            let mut per = BTreeMap::new();
            for layer in unified.keys() {
                let t = c
                    .tensors
                    .get(&format!("{layer}.mask.{task}"))
                    .ok_or_else(|| bad(format!("missing mask {layer}/{task}")))?;
                per.insert(layer.clone(), t.to_f64_vec().iter().map(|&v| v != 0.0).collect());
            }
            masks.insert(task.clone(), per);
            let lam = c
                .tensors
                .get(&format!("{task}.lambda"))
                .ok_or_else(|| bad(format!("missing rescalers for {task}")))?
                .to_f64_vec();
            if lam.len() != unified.len() {
                return Err(bad(format!("{task}: {} rescalers for {} tensors", lam.len(), unified.len())));
            }
            rescalers.insert(task.clone(), unified.keys().cloned().zip(lam).collect());
        }
        Ok(EmrArtifacts {
            tasks,
            unified,
            masks,
            rescalers,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Checks that every delta set covers exactly the base tensors with equal
/// shapes, and returns their values as f64 per tensor name.
fn gather(deltas: &[TaskVectorSet], base: &Checkpoint) -> Result<Vec<(String, Vec<Vec<f64>>)>> {
    if deltas.is_empty() {
        return Err(Error::InvariantViolation("no task vectors to merge".into()));
    }
    for d in deltas {
        if d.layers.len() != base.tensors.len() {
            return Err(Error::IncompatibleTopology(format!(
                "task {} has {} tensors, base has {}",
                d.task_id,
                d.layers.len(),
                base.tensors.len()
            )));
        }
    }
    base.tensors
        .iter()
        .map(|(name, b)| {
            let vals = deltas
                .iter()
                .map(|d| {
                    let t = d.layers.get(name).ok_or_else(|| {
                        Error::IncompatibleTopology(format!("{name} missing in task {}", d.task_id))
                    })?;
                    if t.shape() != b.shape() {
                        return Err(Error::IncompatibleTopology(format!(
                            "{name}: shape {:?} vs base {:?}",
                            t.shape(),
                            b.shape()
                        )));
                    }
                    Ok(t.to_f64_vec())
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((name.clone(), vals))
        })
        .collect()
}

/// Applies a per-tensor combination rule and adds the result to the base.
fn combine(
    deltas: &[TaskVectorSet],
    base: &Checkpoint,
    rule: impl Fn(&[Vec<f64>]) -> Vec<f64> + Sync,
) -> Result<Checkpoint> {
    let gathered = gather(deltas, base)?;
    let merged: Result<Vec<(String, TensorRecord)>> = gathered
        .par_iter()
        .map(|(name, vals)| {
            let b = &base.tensors[name];
            let d = rule(vals);
            let w = b.to_f64_vec().iter().zip(&d).map(|(x, y)| x + y).collect();
            Ok((name.clone(), b.with_values(w)?))
        })
        .collect();
    let mut out = base.clone();
    out.tensors.extend(merged?);
    Ok(out)
}

fn sum_scaled(vals: &[Vec<f64>], scale: f64) -> Vec<f64> {
    let mut acc = vec![0.0; vals[0].len()];
    for v in vals {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    acc.iter_mut().for_each(|a| *a *= scale);
    acc
}

pub fn merge_average(deltas: &[TaskVectorSet], base: &Checkpoint) -> Result<MergedModel> {
    let k = deltas.len() as f64;
    let weights = combine(deltas, base, |v| sum_scaled(v, 1.0 / k))?;
    Ok(MergedModel {
        weights,
        emr: None,
        recipe: None,
    })
}

/// `W_B + λ·Σ_i ΔW_i`.
pub fn merge_task_arithmetic(deltas: &[TaskVectorSet], base: &Checkpoint, lambda: f64) -> Result<MergedModel> {
    let weights = combine(deltas, base, |v| sum_scaled(v, lambda))?;
    Ok(MergedModel {
        weights,
        emr: None,
        recipe: None,
    })
}

/// Number of entries kept by trimming: ⌈keep·N⌉ (at least one).
pub fn trim_count(keep: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    ((keep * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

/// +1, −1 or 0.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Keeps the `trim_count(keep, len)` largest magnitudes (lower index wins ties).
pub fn trim_top(v: &[f64], keep: f64) -> Vec<f64> {
    let k = trim_count(keep, v.len());
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
    let mut out = vec![0.0; v.len()];
    for &i in &idx[..k] {
        out[i] = v[i];
    }
    out
}

/// Ties merged delta for one tensor (before λ).
pub fn ties_delta(vals: &[Vec<f64>], keep: f64) -> Vec<f64> {
    let trimmed: Vec<Vec<f64>> = vals.iter().map(|v| trim_top(v, keep)).collect();
    let n = vals[0].len();
    (0..n)
        .map(|j| {
            let elected = sign(trimmed.iter().map(|t| t[j]).sum());
            if elected == 0.0 {
                return 0.0;
            }
            let (sum, count) = trimmed
                .iter()
                .map(|t| t[j])
                .filter(|&x| sign(x) == elected)
                .fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        })
        .collect()
}

pub fn merge_ties(deltas: &[TaskVectorSet], base: &Checkpoint, lambda: f64, keep: f64) -> Result<MergedModel> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::InvariantViolation(format!("trim keep {keep} outside (0, 1]")));
    }
    let weights = combine(deltas, base, |v| {
        ties_delta(v, keep).into_iter().map(|x| lambda * x).collect()
    })?;
    Ok(MergedModel {
        weights,
        emr: None,
        recipe: None,
    })
}

/// Unified EMR vector for one tensor: elected sign of the sum, magnitude of
/// the largest agreeing entry.
pub fn emr_unified(vals: &[Vec<f64>]) -> Vec<f64> {
    let n = vals[0].len();
    (0..n)
        .map(|j| {
            let elected = sign(vals.iter().map(|v| v[j]).sum());
            let mag = vals
                .iter()
                .map(|v| v[j])
                .filter(|&x| elected != 0.0 && sign(x) == elected)
                .fold(0.0f64, |m, x| m.max(x.abs()));
            elected * mag
        })
        .collect()
}

pub fn merge_emr(deltas: &[TaskVectorSet], base: &Checkpoint) -> Result<MergedModel> {
    let mut seen = std::collections::BTreeSet::new();
    for d in deltas {
        if !seen.insert(d.task_id.as_str()) {
            return Err(Error::InvariantViolation(format!(
                "task id {:?} appears twice; EMR artifacts are keyed by task",
                d.task_id
            )));
        }
    }
    let gathered = gather(deltas, base)?;
    let mut unified = BTreeMap::new();
    let mut masks: BTreeMap<String, BTreeMap<String, Vec<bool>>> = BTreeMap::new();
    let mut rescalers: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for (name, vals) in &gathered {
        let uni = emr_unified(vals);
        for (d, tau) in deltas.iter().zip(vals) {
            let mask: Vec<bool> = tau.iter().zip(&uni).map(|(t, u)| t * u > 0.0).collect();
            let num: f64 = tau.iter().map(|t| t.abs()).sum();
            let den: f64 = mask
                .iter()
                .zip(&uni)
                .map(|(&m, u)| if m { u.abs() } else { 0.0 })
                .sum();
            let lam = if den == 0.0 { 1.0 } else { num / den };
            masks.entry(d.task_id.clone()).or_default().insert(name.clone(), mask);
            rescalers.entry(d.task_id.clone()).or_default().insert(name.clone(), lam);
        }
        unified.insert(name.clone(), uni);
    }
    let mut weights = base.clone();
    for (name, uni) in &unified {
        let b = &base.tensors[name];
        let w = b.to_f64_vec().iter().zip(uni).map(|(x, u)| x + u).collect();
        weights.tensors.insert(name.clone(), b.with_values(w)?);
    }
    Ok(MergedModel {
        weights,
        emr: Some(EmrArtifacts {
            tasks: deltas.iter().map(|d| d.task_id.clone()).collect(),
            unified,
            masks,
            rescalers,
        }),
        recipe: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_store::TaskVectorKind;

    fn base(n: usize) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        tensors.insert("t".to_string(), TensorRecord::from_f64(vec![n], vec![0.0; n]).unwrap());
        Checkpoint {
            tensors,
            linear_layers: vec![],
            metadata: BTreeMap::new(),
        }
    }

    fn tv(id: &str, v: Vec<f64>) -> TaskVectorSet {
        let mut layers = BTreeMap::new();
        layers.insert("t".to_string(), TensorRecord::from_f64(vec![v.len()], v).unwrap());
        TaskVectorSet {
            task_id: id.into(),
            kind: TaskVectorKind::Plain,
            layers,
            provenance: BTreeMap::new(),
        }
    }

    fn weights(m: &MergedModel) -> Vec<f64> {
        m.weights.tensors["t"].to_f64_vec()
    }

    #[test]
    fn average_cancels_opposites() {
        let m = merge_average(&[tv("a", vec![1.0, -2.0]), tv("b", vec![-1.0, 2.0])], &base(2)).unwrap();
        assert_eq!(weights(&m), vec![0.0, 0.0]);
    }

    #[test]
    fn ties_worked_example() {
        let d = ties_delta(&[vec![1.0, -2.0, 0.5], vec![-1.5, -1.0, 0.2]], 2.0 / 3.0);
        assert_eq!(d, vec![-1.5, -1.5, 0.0]);
    }

    #[test]
    fn trim_count_rounding() {
        assert_eq!(trim_count(2.0 / 3.0, 3), 2);
        assert_eq!(trim_count(0.2, 10), 2);
        assert_eq!(trim_count(0.21, 10), 3);
        assert_eq!(trim_count(1e-6, 10), 1);
        assert_eq!(trim_count(1.0, 7), 7);
    }

    #[test]
    fn emr_worked_example() {
        let m = merge_emr(&[tv("a", vec![2.0, -1.0]), tv("b", vec![1.0, 3.0])], &base(2)).unwrap();
        let emr = m.emr.as_ref().unwrap();
        assert_eq!(emr.unified["t"], vec![2.0, 3.0]);
        assert_eq!(emr.masks["a"]["t"], vec![true, false]);
        assert_eq!(emr.masks["b"]["t"], vec![true, true]);
        assert_eq!(emr.rescalers["a"]["t"], 1.5);
        assert_eq!(emr.rescalers["b"]["t"], 0.8);
        let back = EmrArtifacts::from_container(&emr.to_container()).unwrap();
        assert_eq!(&back, emr);
    }

    #[test]
    fn missing_tensor_is_incompatible() {
        let mut d = tv("a", vec![1.0]);
        d.layers.clear();
        assert!(matches!(
            merge_average(&[d], &base(1)),
            Err(Error::IncompatibleTopology(_))
        ));
    }
}
