//! Group-relative advantages and the dynamic-sampling filter.

use serde::{Deserialize, Serialize};

use crate::env::RolloutGroup;
use crate::error::{LabError, Result};

/// Below this population std a group counts as reward-degenerate.
pub const DEGENERATE_STD: f64 = 1e-8;

/// What to do with a group whose rewards are all equal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegeneratePolicy {
    /// Keep the group with every advantage set to zero.
    Zero,
    /// Drop the group.
    Filter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupAdvantages {
    /// One advantage per trajectory; every token of trajectory `i` carries `values[i]`.
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdvantageOutcome {
    Kept(GroupAdvantages),
    Filtered { mean: f64 },
}

/// `(r_i - mean) / std` over raw rewards, with population std.
pub fn normalize_rewards(rewards: &[f64], degenerate: DegeneratePolicy) -> Result<AdvantageOutcome> {
    if rewards.len() < 2 {
        return Err(LabError::input(format!(
            "group normalization needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(LabError::input("non-finite reward"));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < DEGENERATE_STD {
        return Ok(match degenerate {
            DegeneratePolicy::Zero => AdvantageOutcome::Kept(GroupAdvantages {
                values: vec![0.0; rewards.len()],
                mean,
                std,
                degenerate: true,
            }),
            DegeneratePolicy::Filter => AdvantageOutcome::Filtered { mean },
        });
    }
    Ok(AdvantageOutcome::Kept(GroupAdvantages {
        values: rewards.iter().map(|r| (r - mean) / std).collect(),
        mean,
        std,
        degenerate: false,
    }))
}

pub fn group_advantages(group: &RolloutGroup, degenerate: DegeneratePolicy) -> Result<AdvantageOutcome> {
    normalize_rewards(&group.rewards(), degenerate)
}

fn all_equal(rewards: &[f64]) -> bool {
    rewards.windows(2).all(|w| w[0] == w[1])
}

/// Drops groups whose members all received the same reward. Order is preserved.
///
/// An empty result is returned as [`LabError::EmptyBatch`] with `step` and
/// `attempts` zeroed; the trainer resamples and fills those in if it gives up.
pub fn dynamic_sampling_filter(groups: Vec<RolloutGroup>) -> Result<Vec<RolloutGroup>> {
    let kept: Vec<RolloutGroup> = groups.into_iter().filter(|g| !all_equal(&g.rewards())).collect();
    if kept.is_empty() {
        return Err(LabError::EmptyBatch { step: 0, attempts: 0 });
    }
    Ok(kept)
}
