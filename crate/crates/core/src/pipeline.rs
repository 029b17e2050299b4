//! Executes a [`MergeRecipe`]: task vectors (plain, DARE or purified with
//! allocated ranks), then the chosen merging rule.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::merge::{merge_average, merge_emr, merge_task_arithmetic, merge_ties, MergedModel};
use crate::purify::{dare_task_vector, factor_model, plain_task_vector, Decomposer};
use crate::rank_alloc::{allocate_with_exempt, RankAllocation};
use crate::recipe::{MergeMethod, MergeRecipe};
use crate::rng::CounterRng;
use crate::tensor_store::{
    check_compat, read_checkpoint, read_covariance, Checkpoint, CovarianceSet, TaskVectorSet,
};

#[derive(Debug, Clone)]
pub struct MergeRun {
    pub merged: MergedModel,
    pub task_vectors: Vec<TaskVectorSet>,
    pub allocation: Option<RankAllocation>,
}

/// Per-task seed derived from the recipe seed, so tasks never share masks.
pub fn task_seed(seed: u64, task_id: &str) -> u64 {
    CounterRng::new(seed, task_id).bits(0)
}

/// Task vectors for every recipe input, in input order.
pub fn build_task_vectors(
    recipe: &MergeRecipe,
    base: &Checkpoint,
    finetuned: &[Checkpoint],
    covs: &[Option<CovarianceSet>],
) -> Result<(Vec<TaskVectorSet>, Option<RankAllocation>)> {
    recipe.validate()?;
    if finetuned.len() != recipe.inputs.len() || covs.len() != recipe.inputs.len() {
        return Err(Error::InvariantViolation(
            "one checkpoint and covariance slot per recipe input".into(),
        ));
    }
    for (inp, ft) in recipe.inputs.iter().zip(finetuned) {
        let report = check_compat(base, ft);
        if !report.is_compatible() {
            return Err(Error::IncompatibleTopology(format!("{}: {report}", inp.task_id)));
        }
    }
    let ids = recipe.task_ids();

    let Some(p) = &recipe.purification else {
        let mut out = Vec::with_capacity(finetuned.len());
        for (id, ft) in ids.iter().zip(finetuned) {
            let mut tv = plain_task_vector(ft, base)?;
            tv.task_id = id.clone();
            if let Some(rate) = recipe.dare_p {
                tv = dare_task_vector(&tv, rate, task_seed(recipe.seed, id))?;
            }
            out.push(tv);
        }
        return Ok((out, None));
    };

    let cross = match &p.decomposer {
        Decomposer::CoSvdCrosstask { task_id } => {
            let i = ids.iter().position(|t| t == task_id).expect("validated");
            Some(covs[i].as_ref().ok_or_else(|| Error::MissingCovariance(task_id.clone()))?)
        }
        _ => None,
    };
    let mut factored = Vec::with_capacity(finetuned.len());
    for ((id, ft), cov) in ids.iter().zip(finetuned).zip(covs) {
        let c = if p.decomposer.needs_covariance() {
            Some(cross.or(cov.as_ref()).ok_or_else(|| Error::MissingCovariance(id.clone()))?)
        } else {
            None
        };
        let mut f = factor_model(ft, c, &p.decomposer)?;
        f.model_id = id.clone();
        factored.push(f);
    }
    let profiles: Vec<_> = factored.iter().map(|f| f.profile()).collect();
    let exempt: BTreeSet<String> = p.exempt.iter().cloned().collect();
    let alloc = allocate_with_exempt(&profiles, p.rho, p.gamma, &exempt)?;
    let mut out = Vec::with_capacity(finetuned.len());
    for ((id, ft), f) in ids.iter().zip(finetuned).zip(&factored) {
        let ranks = alloc.ranks_for(id).expect("allocated for every input");
        let mut tv = f.purify(ft, base, &ranks)?.vectors;
        tv.task_id = id.clone();
        out.push(tv);
    }
    Ok((out, Some(alloc)))
}

pub fn merge_vectors(
    recipe: &MergeRecipe,
    vectors: &[TaskVectorSet],
    base: &Checkpoint,
) -> Result<MergedModel> {
    let mut merged = match recipe.method {
        MergeMethod::Average => merge_average(vectors, base)?,
        MergeMethod::TaskArithmetic => merge_task_arithmetic(vectors, base, recipe.lambda)?,
        MergeMethod::Ties => merge_ties(vectors, base, recipe.lambda, recipe.ties_trim_keep)?,
        MergeMethod::Emr => merge_emr(vectors, base)?,
    };
    merged.recipe = Some(recipe.clone());
    Ok(merged)
}

pub fn merge_in_memory(
    recipe: &MergeRecipe,
    base: &Checkpoint,
    finetuned: &[Checkpoint],
    covs: &[Option<CovarianceSet>],
) -> Result<MergeRun> {
    let (task_vectors, allocation) = build_task_vectors(recipe, base, finetuned, covs)?;
    let merged = merge_vectors(recipe, &task_vectors, base)?;
    Ok(MergeRun {
        merged,
        task_vectors,
        allocation,
    })
}

/// Loads every file named by the recipe (relative paths resolve against
/// `root`) and runs the merge.
pub fn run_recipe(recipe: &MergeRecipe, root: &Path) -> Result<MergeRun> {
    recipe.validate()?;
    let resolve = |p: &str| -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            root.join(p)
        }
    };
    let base = read_checkpoint(resolve(&recipe.base))?;
    let mut fts = Vec::new();
    let mut covs = Vec::new();
    for inp in &recipe.inputs {
        fts.push(read_checkpoint(resolve(&inp.checkpoint))?);
        covs.push(match &inp.covariance {
            Some(c) if recipe.purification.is_some() => Some(read_covariance(resolve(c))?),
            _ => None,
        });
    }
    merge_in_memory(recipe, &base, &fts, &covs)
}
