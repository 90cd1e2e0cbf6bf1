//! Exact tabular softmax policy.
//!
//! A [`TabularPolicy`] is a logit table `z[s, a]`; the action distribution at
//! state `s` is `softmax(z[s, ..])`. Every quantity the lab needs from a
//! policy (probabilities, entropy, KL, score function) has a closed form here,
//! which is what lets the gradient and entropy oracles be exact.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    logits: Array2<f64>,
}

/// Softmax of one logit row, computed with max subtraction.
pub fn softmax(row: ArrayView1<'_, f64>) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
    let norm: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / norm).collect()
}

/// Shannon entropy in nats with the `0 ln 0 = 0` convention.
pub fn entropy_of(probs: &[f64]) -> f64 {
    let h = -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>();
    // Rounding can leave a -1e-17 residue on one-hot rows.
    h.max(0.0)
}

/// KL divergence between two rows, or [`Kl::Divergent`] when `q` puts zero
/// mass on an action `p` can take.
pub fn kl_of(p: &[f64], q: &[f64]) -> Kl {
    let mut acc = 0.0;
    for (&pa, &qa) in p.iter().zip(q) {
        if pa == 0.0 {
            continue;
        }
        if qa == 0.0 {
            return Kl::Divergent;
        }
        acc += pa * (pa / qa).ln();
    }
    Kl::Finite(acc.max(0.0))
}

/// Result of a KL evaluation. Divergence is a value, not an error, so that
/// monitors can log it and keep going.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kl {
    Finite(f64),
    Divergent,
}

impl Kl {
    /// The divergence as a real, with `+inf` standing in for the divergent case.
    pub fn value(self) -> f64 {
        match self {
            Kl::Finite(v) => v,
            Kl::Divergent => f64::INFINITY,
        }
    }

    pub fn is_divergent(self) -> bool {
        matches!(self, Kl::Divergent)
    }
}

impl TabularPolicy {
    /// All-zero logits: the uniform policy.
    pub fn uniform(num_states: usize, num_actions: usize) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(LabError::input(format!(
                "policy needs at least one state and one action, got {num_states}x{num_actions}"
            )));
        }
        Ok(Self {
            logits: Array2::zeros((num_states, num_actions)),
        })
    }

    pub fn from_logits(logits: Array2<f64>) -> Result<Self> {
        if logits.nrows() == 0 || logits.ncols() == 0 {
            return Err(LabError::input("empty logit table"));
        }
        if let Some(index) = logits.iter().position(|z| !z.is_finite()) {
            return Err(LabError::NonFinite {
                what: "logits",
                index,
            });
        }
        Ok(Self { logits })
    }

    pub fn num_states(&self) -> usize {
        self.logits.nrows()
    }

    pub fn num_actions(&self) -> usize {
        self.logits.ncols()
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.num_states(), self.num_actions())
    }

    fn check_state(&self, state: usize) -> Result<()> {
        if state >= self.num_states() {
            return Err(LabError::input(format!(
                "state {state} out of range (num_states = {})",
                self.num_states()
            )));
        }
        Ok(())
    }

    pub fn action_probabilities(&self, state: usize) -> Result<Vec<f64>> {
        self.check_state(state)?;
        Ok(softmax(self.logits.row(state)))
    }

    /// `ln pi(action | state)`, taken as the log of the probability vector so
    /// that it agrees bit-for-bit with the value reported by sampling.
    pub fn log_prob(&self, state: usize, action: usize) -> Result<f64> {
        let probs = self.action_probabilities(state)?;
        probs
            .get(action)
            .map(|p| p.ln())
            .ok_or_else(|| LabError::input(format!("action {action} out of range")))
    }

    pub fn exact_entropy(&self, state: usize) -> Result<f64> {
        Ok(entropy_of(&self.action_probabilities(state)?))
    }

    /// Draws an action from the softmax row and returns it with its
    /// log-probability.
    pub fn sample_action<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> Result<(usize, f64)> {
        let probs = self.action_probabilities(state)?;
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = probs.len() - 1;
        for (a, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                chosen = a;
                break;
            }
        }
        // Rounding in the cumulative sum may land on a zero-mass tail entry.
        while probs[chosen] == 0.0 && chosen > 0 {
            chosen -= 1;
        }
        Ok((chosen, probs[chosen].ln()))
    }

    /// Gradient ascent on the logits: `z += learning_rate * gradient`.
    ///
    /// The update is all-or-nothing; on error the logits are untouched.
    pub fn apply_gradient(&mut self, gradient: &Array2<f64>, learning_rate: f64) -> Result<()> {
        if gradient.dim() != self.logits.dim() {
            return Err(LabError::input(format!(
                "gradient shape {:?} does not match logits {:?}",
                gradient.dim(),
                self.logits.dim()
            )));
        }
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(LabError::input(format!(
                "learning rate must be positive and finite, got {learning_rate}"
            )));
        }
        if let Some(index) = gradient.iter().position(|g| !g.is_finite()) {
            return Err(LabError::NonFinite {
                what: "gradient",
                index,
            });
        }
        let updated = &self.logits + &(gradient * learning_rate);
        if let Some(index) = updated.iter().position(|z| !z.is_finite()) {
            return Err(LabError::NonFinite {
                what: "updated logits",
                index,
            });
        }
        self.logits = updated;
        Ok(())
    }

    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot {
            inner: Arc::new(self.clone()),
        }
    }
}

/// KL(p || q) at one state.
pub fn exact_kl(p: &TabularPolicy, q: &TabularPolicy, state: usize) -> Result<Kl> {
    if p.shape() != q.shape() {
        return Err(LabError::input(format!(
            "policy shapes differ: {:?} vs {:?}",
            p.shape(),
            q.shape()
        )));
    }
    Ok(kl_of(&p.action_probabilities(state)?, &q.action_probabilities(state)?))
}

/// Frozen copy of a policy taken at rollout time. Cheap to clone; there is no
/// way to mutate the logits behind it.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    inner: Arc<TabularPolicy>,
}

impl PolicySnapshot {
    pub fn policy(&self) -> &TabularPolicy {
        &self.inner
    }
}

impl std::ops::Deref for PolicySnapshot {
    type Target = TabularPolicy;

    fn deref(&self) -> &TabularPolicy {
        &self.inner
    }
}

pub const CHECKPOINT_FORMAT: &str = "cegppo-policy/1";

/// On-disk policy. Logits are row-major 17-significant-digit decimal strings,
/// which round-trip every `f64` exactly.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub num_states: usize,
    pub num_actions: usize,
    pub logits: Vec<String>,
    /// Seeds of every run that produced this table, oldest first.
    pub seed_lineage: Vec<u64>,
    pub step: usize,
}

fn encode_f64(x: f64) -> String {
    format!("{x:.16e}")
}

impl Checkpoint {
    pub fn from_policy(policy: &TabularPolicy, seed_lineage: Vec<u64>, step: usize) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            num_states: policy.num_states(),
            num_actions: policy.num_actions(),
            logits: policy.logits.iter().map(|&z| encode_f64(z)).collect(),
            seed_lineage,
            step,
        }
    }

    pub fn to_policy(&self) -> Result<TabularPolicy> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(LabError::input(format!(
                "unsupported checkpoint format {:?}",
                self.format
            )));
        }
        if self.logits.len() != self.num_states * self.num_actions {
            return Err(LabError::input(format!(
                "checkpoint holds {} logits, expected {}x{}",
                self.logits.len(),
                self.num_states,
                self.num_actions
            )));
        }
        let values = self
            .logits
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| LabError::input(format!("bad logit {s:?}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let logits = Array2::from_shape_vec((self.num_states, self.num_actions), values)
            .map_err(|e| LabError::input(e.to_string()))?;
        TabularPolicy::from_logits(logits)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}
