//! Ensemble reward-model baselines: mean, worst-case and
//! uncertainty-weighted aggregation of independently seeded members.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{RewardModel, Token};
use crate::score::RewardScorer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    Mean,
    WorstCase,
    UncertaintyWeighted,
}

/// Aggregates member scores. Uncertainty weighting is `mean - k·std` with the
/// population standard deviation.
pub fn aggregate(scores: &[f64], mode: EnsembleMode, k_unc: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    // Sorted, anchored summation: exact for identical members and independent
    // of member order.
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let anchor = sorted[0];
    let mean = anchor + sorted.iter().map(|s| s - anchor).sum::<f64>() / n;
    Ok(match mode {
        EnsembleMode::Mean => mean,
        EnsembleMode::WorstCase => anchor,
        EnsembleMode::UncertaintyWeighted => {
            if k_unc == 0.0 {
                return Ok(mean);
            }
            let var = sorted.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
            mean - k_unc * var.sqrt()
        }
    })
}

pub struct EnsembleRm {
    members: Vec<RewardModel>,
    pub mode: EnsembleMode,
    pub k_unc: f64,
}

impl EnsembleRm {
    pub fn new(members: Vec<RewardModel>, mode: EnsembleMode, k_unc: f64) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EmptyEnsemble);
        }
        if members.len() < 2 {
            return Err(Error::InvalidConfig("an ensemble needs at least two members".into()));
        }
        // Members differ in their init seed by construction.
        let shape = |m: &RewardModel| {
            let mut l = m.layout();
            l.config.seed = 0;
            l
        };
        let layout = shape(&members[0]);
        if members.iter().any(|m| shape(m) != layout) {
            return Err(Error::InvalidConfig("ensemble members must share an architecture".into()));
        }
        Ok(Self { members, mode, k_unc })
    }

    pub fn members(&self) -> &[RewardModel] {
        &self.members
    }

    pub fn member_scores(&self, prompt: &[Token], response: &[Token]) -> Result<Vec<f64>> {
        self.members.iter().map(|m| m.reward_score(prompt, response)).collect()
    }

    pub fn ensemble_score(&self, prompt: &[Token], response: &[Token]) -> Result<f64> {
        aggregate(&self.member_scores(prompt, response)?, self.mode, self.k_unc)
    }
}

impl RewardScorer for EnsembleRm {
    fn score(&self, prompt: &[Token], response: &[Token]) -> Result<f64> {
        self.ensemble_score(prompt, response)
    }
}

/// On-disk ensemble description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleManifest {
    pub members: Vec<String>,
    pub mode: EnsembleMode,
    #[serde(default = "default_k")]
    pub k_unc: f64,
}

fn default_k() -> f64 {
    1.0
}
