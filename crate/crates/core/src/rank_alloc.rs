//! Greedy spectral rank allocation across models sharing a layer.
//!
//! Each layer starts with every model at full rank. The smallest normalized
//! singular value among the models still being pruned is dropped, one at a
//! time, until the layer's total preserved rank fits the budget `ρ·K·R` or
//! every model has reached its floor `γ·R`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::singular_values;
use crate::recipe::{check_budget, MergeRecipe};
use crate::tensor_store::{check_compat, Checkpoint, CovarianceSet};

/// Full spectrum of one layer's activated product, raw and normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpectrum {
    pub layer: String,
    pub sigma: Vec<f64>,
    pub s: Vec<f64>,
}

impl LayerSpectrum {
    pub fn new(layer: impl Into<String>, sigma: Vec<f64>) -> Self {
        let s = normalize(&sigma);
        LayerSpectrum {
            layer: layer.into(),
            sigma,
            s,
        }
    }

    pub fn full_rank(&self) -> usize {
        self.sigma.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralProfile {
    pub model_id: String,
    pub layers: Vec<LayerSpectrum>,
}

/// `σ / σ_max`; an all-zero spectrum stays all zero.
pub fn normalize(sigma: &[f64]) -> Vec<f64> {
    let max = sigma.iter().fold(0.0f64, |m, &v| m.max(v));
    if max > 0.0 {
        sigma.iter().map(|v| v / max).collect()
    } else {
        vec![0.0; sigma.len()]
    }
}

/// Spectra of `W_i·C_i` for every model and linear layer.
pub fn build_profiles(checkpoints: &[Checkpoint], covs: &[CovarianceSet]) -> Result<Vec<SpectralProfile>> {
    if checkpoints.len() != covs.len() {
        return Err(Error::MissingCovariance(format!(
            "{} checkpoints but {} covariance sets",
            checkpoints.len(),
            covs.len()
        )));
    }
    if let Some(first) = checkpoints.first() {
        for ck in &checkpoints[1..] {
            let r = check_compat(first, ck);
            if !r.is_compatible() {
                return Err(Error::IncompatibleTopology(r.to_string()));
            }
        }
    }
    checkpoints
        .iter()
        .zip(covs)
        .map(|(ck, cov)| {
            let layers: Result<Vec<LayerSpectrum>> = ck
                .linear_layers
                .par_iter()
                .map(|name| {
                    let w = ck.matrix(name)?;
                    let c = &cov.entry(name)?.matrix;
                    Ok(LayerSpectrum::new(name.clone(), singular_values(&w.matmul(c)?)?))
                })
                .collect();
            Ok(SpectralProfile {
                model_id: cov.task_id.clone(),
                layers: layers?,
            })
        })
        .collect()
}

/// Preserved ranks per (model, layer).
#[derive(Debug, Clone, PartialEq)]
pub struct RankAllocation {
    pub rho: f64,
    pub gamma: f64,
    pub full_rank_models: BTreeSet<String>,
    pub models: Vec<String>,
    pub layers: Vec<String>,
    /// R^l per layer.
    pub full_ranks: Vec<usize>,
    /// `ranks[i][l]`.
    pub ranks: Vec<Vec<usize>>,
}

impl RankAllocation {
    pub fn ranks_for(&self, model: &str) -> Option<BTreeMap<String, usize>> {
        let i = self.models.iter().position(|m| m == model)?;
        Some(self.layers.iter().cloned().zip(self.ranks[i].iter().copied()).collect())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# rho={}", self.rho).unwrap();
        writeln!(out, "# gamma={}", self.gamma).unwrap();
        let exempt: Vec<&str> = self.full_rank_models.iter().map(String::as_str).collect();
        writeln!(out, "# exempt={}", exempt.join(",")).unwrap();
        out.push_str("model_id,layer,R,r\n");
        for (i, m) in self.models.iter().enumerate() {
            for (l, layer) in self.layers.iter().enumerate() {
                writeln!(out, "{m},{layer},{},{}", self.full_ranks[l], self.ranks[i][l]).unwrap();
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::InvariantViolation(format!("allocation file: {msg}"));
        let mut rho = None;
        let mut gamma = None;
        let mut exempt = BTreeSet::new();
        let mut models: Vec<String> = Vec::new();
        let mut layers: Vec<String> = Vec::new();
        let mut full: BTreeMap<String, usize> = BTreeMap::new();
        let mut cells: BTreeMap<(String, String), usize> = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(kv) = line.strip_prefix('#') {
                let (k, v) = kv.trim().split_once('=').ok_or_else(|| bad(line.into()))?;
                match k {
                    "rho" => rho = Some(v.parse::<f64>().map_err(|e| bad(e.to_string()))?),
                    "gamma" => gamma = Some(v.parse::<f64>().map_err(|e| bad(e.to_string()))?),
                    "exempt" => exempt = v.split(',').filter(|s| !s.is_empty()).map(String::from).collect(),
                    _ => {}
                }
                continue;
            }
            if line == "model_id,layer,R,r" {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(format!("expected 4 fields in {line:?}")));
            }
            let parse = |s: &str| s.parse::<usize>().map_err(|e| bad(e.to_string()));
            let (big_r, r) = (parse(f[2])?, parse(f[3])?);
            if !models.iter().any(|m| m == f[0]) {
                models.push(f[0].into());
            }
            if !layers.iter().any(|l| l == f[1]) {
                layers.push(f[1].into());
            }
            if *full.entry(f[1].into()).or_insert(big_r) != big_r {
                return Err(bad(format!("layer {} has two full ranks", f[1])));
            }
            cells.insert((f[0].into(), f[1].into()), r);
        }
        let ranks = models
            .iter()
            .map(|m| {
                layers
                    .iter()
                    .map(|l| cells.get(&(m.clone(), l.clone())).copied().ok_or_else(|| bad(format!("no entry for {m},{l}"))))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RankAllocation {
            rho: rho.ok_or_else(|| bad("missing rho".into()))?,
            gamma: gamma.ok_or_else(|| bad("missing gamma".into()))?,
            full_rank_models: exempt,
            full_ranks: layers.iter().map(|l| full[l]).collect(),
            models,
            layers,
            ranks,
        })
    }
}

/// Greedy allocation for one layer. `s[i]` is model i's normalized spectrum
/// (all of length R); models with `exempt[i]` keep full rank but still count
/// toward the budget.
pub fn allocate_layer(s: &[&[f64]], rho: f64, gamma: f64, exempt: &[bool]) -> Vec<usize> {
    let k = s.len();
    let big_r = s.first().map_or(0, |v| v.len());
    let mut r = vec![big_r; k];
    let floor = gamma * big_r as f64;
    let budget = rho * (k * big_r) as f64 + 1e-9;
    let mut active: Vec<bool> = (0..k).map(|i| !exempt[i] && (big_r as f64) > floor).collect();
    while (r.iter().sum::<usize>() as f64) > budget {
        let pick = (0..k).filter(|&i| active[i]).min_by(|&a, &b| {
            s[a][r[a] - 1]
                .total_cmp(&s[b][r[b] - 1])
                .then(r[b].cmp(&r[a]))
                .then(a.cmp(&b))
        });
        let Some(t) = pick else { break };
        r[t] -= 1;
        if (r[t] as f64) <= floor || r[t] == 0 {
            active[t] = false;
        }
    }
    r
}

/// Σ_i Σ_{j>r_i} s_{i,j}², summed in ascending order so equal multisets of
/// discarded values give bit-identical totals.
pub fn discarded_mass(s: &[&[f64]], ranks: &[usize]) -> f64 {
    let mut sq: Vec<f64> = s
        .iter()
        .zip(ranks)
        .flat_map(|(v, &r)| v[r..].iter().map(|x| x * x))
        .collect();
    sq.sort_by(f64::total_cmp);
    sq.iter().sum()
}

pub fn allocate(profiles: &[SpectralProfile], rho: f64, gamma: f64) -> Result<RankAllocation> {
    allocate_with_exempt(profiles, rho, gamma, &BTreeSet::new())
}

pub fn allocate_with_exempt(
    profiles: &[SpectralProfile],
    rho: f64,
    gamma: f64,
    exempt: &BTreeSet<String>,
) -> Result<RankAllocation> {
    check_budget(rho, gamma)?;
    let layers: Vec<String> = profiles
        .first()
        .map(|p| p.layers.iter().map(|l| l.layer.clone()).collect())
        .unwrap_or_default();
    let mut full_ranks = Vec::with_capacity(layers.len());
    for (l, name) in layers.iter().enumerate() {
        let big_r = profiles[0].layers[l].full_rank();
        for p in profiles {
            match p.layers.get(l) {
                Some(ls) if &ls.layer == name && ls.full_rank() == big_r => {}
                _ => {
                    return Err(Error::DimensionMismatch(format!(
                        "profile {} disagrees on layer {name}",
                        p.model_id
                    )))
                }
            }
        }
        full_ranks.push(big_r);
    }
    let flags: Vec<bool> = profiles.iter().map(|p| exempt.contains(&p.model_id)).collect();
    let per_layer: Vec<Vec<usize>> = (0..layers.len())
        .into_par_iter()
        .map(|l| {
            let s: Vec<&[f64]> = profiles.iter().map(|p| p.layers[l].s.as_slice()).collect();
            allocate_layer(&s, rho, gamma, &flags)
        })
        .collect();
    let ranks = (0..profiles.len())
        .map(|i| per_layer.iter().map(|r| r[i]).collect())
        .collect();
    Ok(RankAllocation {
        rho,
        gamma,
        full_rank_models: exempt.clone(),
        models: profiles.iter().map(|p| p.model_id.clone()).collect(),
        layers,
        full_ranks,
        ranks,
    })
}

/// `ρ_i = Σ_l r_i^l / Σ_l R^l`.
pub fn per_model_ratios(alloc: &RankAllocation) -> BTreeMap<String, f64> {
    let total: usize = alloc.full_ranks.iter().sum();
    alloc
        .models
        .iter()
        .zip(&alloc.ranks)
        .map(|(m, r)| {
            let kept: usize = r.iter().sum();
            let ratio = if total == 0 { 1.0 } else { kept as f64 / total as f64 };
            (m.clone(), ratio)
        })
        .collect()
}

/// Exempts the not-yet-exempt task with the largest `individual − merged`
/// score gap (lowest input index on ties) and re-runs the allocation.
pub fn progressive_full_rank(
    recipe: &MergeRecipe,
    profiles: &[SpectralProfile],
    scores: &BTreeMap<String, (f64, f64)>,
) -> Result<RankAllocation> {
    let p = recipe
        .purification
        .as_ref()
        .ok_or_else(|| Error::Schema(vec!["progressive full rank needs purification settings".into()]))?;
    let mut exempt: BTreeSet<String> = p.exempt.iter().cloned().collect();
    let mut best: Option<(f64, &str)> = None;
    for id in recipe.inputs.iter().map(|i| i.task_id.as_str()) {
        if exempt.contains(id) {
            continue;
        }
        let (merged, individual) = *scores
            .get(id)
            .ok_or_else(|| Error::InvariantViolation(format!("no score for task {id}")))?;
        let gap = individual - merged;
        if best.is_none_or(|(g, _)| gap.total_cmp(&g) == Ordering::Greater) {
            best = Some((gap, id));
        }
    }
    let (_, chosen) = best.ok_or(Error::AllExempt)?;
    exempt.insert(chosen.to_string());
    allocate_with_exempt(profiles, p.rho, p.gamma, &exempt)
}
