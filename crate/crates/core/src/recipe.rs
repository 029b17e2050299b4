//! Declarative merge recipes. A recipe is parsed leniently (defaults may be
//! omitted), validated, and then frozen with every default written out.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::purify::Decomposer;

pub const DEFAULT_LAMBDA: f64 = 0.3;
pub const DEFAULT_TRIM_KEEP: f64 = 0.2;
pub const DEFAULT_RHO: f64 = 7.0 / 8.0;

/// γ = ρ − (1 − ρ)/2.
pub fn default_gamma(rho: f64) -> f64 {
    rho - (1.0 - rho) / 2.0
}

/// `0 < γ ≤ ρ ≤ 1`.
pub fn check_budget(rho: f64, gamma: f64) -> Result<()> {
    if rho.is_finite() && gamma.is_finite() && gamma > 0.0 && gamma <= rho && rho <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidBudget { rho, gamma })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Average,
    TaskArithmetic,
    Ties,
    Emr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Purification {
    pub decomposer: Decomposer,
    pub rho: f64,
    pub gamma: f64,
    pub exempt: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeInput {
    pub checkpoint: String,
    pub covariance: Option<String>,
    pub task_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeRecipe {
    pub method: MergeMethod,
    pub lambda: f64,
    pub ties_trim_keep: f64,
    pub dare_p: Option<f64>,
    pub purification: Option<Purification>,
    pub inputs: Vec<RecipeInput>,
    pub base: String,
    pub seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPurification {
    decomposer: Option<Decomposer>,
    rho: Option<f64>,
    gamma: Option<f64>,
    exempt: Option<Vec<String>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecipe {
    method: MergeMethod,
    lambda: Option<f64>,
    ties_trim_keep: Option<f64>,
    dare_p: Option<f64>,
    purification: Option<RawPurification>,
    inputs: Vec<RecipeInput>,
    base: String,
    seed: Option<u64>,
}

impl MergeRecipe {
    /// Parses, fills defaults and validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawRecipe =
            serde_json::from_str(text).map_err(|e| Error::Schema(vec![e.to_string()]))?;
        let purification = raw.purification.map(|p| {
            let rho = p.rho.unwrap_or(DEFAULT_RHO);
            Purification {
                decomposer: p.decomposer.unwrap_or(Decomposer::CoSvd),
                rho,
                gamma: p.gamma.unwrap_or_else(|| default_gamma(rho)),
                exempt: p.exempt.unwrap_or_default(),
            }
        });
        let recipe = MergeRecipe {
            method: raw.method,
            lambda: raw.lambda.unwrap_or(DEFAULT_LAMBDA),
            ties_trim_keep: raw.ties_trim_keep.unwrap_or(DEFAULT_TRIM_KEEP),
            dare_p: raw.dare_p,
            purification,
            inputs: raw.inputs,
            base: raw.base,
            seed: raw.seed.unwrap_or(0),
        };
        recipe.validate()?;
        Ok(recipe)
    }

    /// Frozen form with every field explicit.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("recipe serializes")
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.inputs.iter().map(|i| i.task_id.clone()).collect()
    }

    /// Every violation found, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(0.0..=2.0).contains(&self.lambda) {
            errs.push(format!("lambda {} outside [0, 2]", self.lambda));
        }
        if !(self.ties_trim_keep > 0.0 && self.ties_trim_keep <= 1.0) {
            errs.push(format!("ties_trim_keep {} outside (0, 1]", self.ties_trim_keep));
        }
        if let Some(p) = self.dare_p {
            if !(0.0..1.0).contains(&p) {
                errs.push(format!("dare_p {p} outside [0, 1)"));
            }
            if self.purification.is_some() {
                errs.push("dare_p and purification are mutually exclusive".into());
            }
        }
        if self.inputs.is_empty() {
            errs.push("inputs is empty".into());
        }
        let mut ids = BTreeSet::new();
        for inp in &self.inputs {
            if inp.task_id.is_empty() {
                errs.push(format!("input {} has an empty task_id", inp.checkpoint));
            } else if !ids.insert(inp.task_id.as_str()) {
                errs.push(format!("task_id {} appears twice", inp.task_id));
            }
        }
        if let Some(p) = &self.purification {
            if check_budget(p.rho, p.gamma).is_err() {
                errs.push(format!("need 0 < gamma <= rho <= 1, got rho={} gamma={}", p.rho, p.gamma));
            }
            for e in &p.exempt {
                if !ids.contains(e.as_str()) {
                    errs.push(format!("exempt task {e} is not an input"));
                }
            }
            if let Decomposer::CoSvdCrosstask { task_id } = &p.decomposer {
                if !ids.contains(task_id.as_str()) {
                    errs.push(format!("cross-task covariance {task_id} is not an input"));
                }
            }
            if p.decomposer.needs_covariance() {
                for inp in self.inputs.iter().filter(|i| i.covariance.is_none()) {
                    errs.push(format!("input {} needs a covariance", inp.task_id));
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Schema(errs))
        }
    }
}
