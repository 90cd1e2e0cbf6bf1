//! Finite-difference checks of the analytic objective gradients.
//!
//! The oracle never touches [`TokenTerm`](crate::objectives::TokenTerm)
//! weights. It evaluates each objective's forward expression literally,
//! recomputing the live ratio at every perturbed point while holding every
//! stop-gradient factor at its value at the unperturbed logits, and
//! differentiates that by central differences.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::objectives::{evaluate_surrogate, Aggregation, Algorithm, BatchSequence, Branch, ObjectiveSpec};
use crate::policy::{entropy_of, TabularPolicy};
use crate::rng::{stream, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    pub rel_tol: f64,
    /// Coordinates whose absolute error is below this pass regardless of relative error.
    pub abs_tol: f64,
    /// Hits required in each branch.
    pub min_branch_hits: usize,
    /// Tokens whose ratio lies within `boundary_margin * step` (scaled by the
    /// ratio) of a clip bound exclude their state's row from comparison.
    pub boundary_margin: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-5,
            abs_tol: 1e-8,
            min_branch_hits: 16,
            boundary_margin: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchCoverage {
    pub left_clipped: usize,
    pub right_clipped: usize,
    pub interior_or_pessimistic: usize,
}

impl BranchCoverage {
    fn add(&mut self, b: Branch) {
        match b {
            Branch::LeftClipped => self.left_clipped += 1,
            Branch::RightClipped => self.right_clipped += 1,
            Branch::InteriorOrPessimistic => self.interior_or_pessimistic += 1,
        }
    }

    pub fn min(&self) -> usize {
        self.left_clipped.min(self.right_clipped).min(self.interior_or_pessimistic)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub algorithm: Algorithm,
    pub max_abs_error: f64,
    /// Largest relative error among coordinates above the absolute floor.
    pub max_rel_error: f64,
    pub worst_coordinate: (usize, usize),
    pub coverage: BranchCoverage,
    pub coordinates_checked: usize,
    /// Rows left out because a token there sits on a clip kink.
    pub excluded_states: Vec<usize>,
    /// Coordinates where the objective was non-finite at a perturbed point.
    pub non_finite_coordinates: Vec<(usize, usize)>,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct NumericGradient {
    pub gradient: Array2<f64>,
    pub non_finite: Vec<(usize, usize)>,
}

/// Central differences `(J(z + h e) - J(z - h e)) / 2h` over every logit.
///
/// Coordinates where either evaluation is non-finite are left at zero and
/// listed in `non_finite`.
pub fn numeric_gradient<F>(objective: F, policy: &TabularPolicy, step: f64) -> Result<NumericGradient>
where
    F: Fn(&TabularPolicy) -> f64 + Sync,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(LabError::input(format!("finite-difference step must be positive, got {step}")));
    }
    let (rows, cols) = policy.shape();
    let cells: Vec<(usize, usize, Option<f64>)> = (0..rows * cols)
        .into_par_iter()
        .map(|k| {
            let (s, a) = (k / cols, k % cols);
            let probe = |sign: f64| {
                let mut z = policy.logits().clone();
                z[(s, a)] += sign * step;
                TabularPolicy::from_logits(z).ok().map(|p| objective(&p))
            };
            let d = match (probe(1.0), probe(-1.0)) {
                (Some(up), Some(dn)) if up.is_finite() && dn.is_finite() => Some((up - dn) / (2.0 * step)),
                _ => None,
            };
            (s, a, d)
        })
        .collect();
    let mut gradient = Array2::zeros((rows, cols));
    let mut non_finite = Vec::new();
    for (s, a, d) in cells {
        match d {
            Some(v) => gradient[(s, a)] = v,
            None => non_finite.push((s, a)),
        }
    }
    Ok(NumericGradient { gradient, non_finite })
}

fn clip(x: f64, lo: f64, hi: f64) -> f64 {
    x.max(lo).min(hi)
}

/// Ratios `pi(a|s) / pi_old(a|s)` at `policy` for every token, by sequence.
pub fn token_ratios(policy: &TabularPolicy, sequences: &[BatchSequence]) -> Result<Vec<Vec<f64>>> {
    sequences
        .iter()
        .map(|seq| {
            seq.states
                .iter()
                .zip(&seq.actions)
                .zip(&seq.old_logprobs)
                .map(|((&s, &a), &old)| Ok((policy.log_prob(s, a)? - old).exp()))
                .collect()
        })
        .collect()
}

/// Literal forward pass of `spec`'s objective at `live`, with stop-gradient
/// factors evaluated at `frozen` ratios.
pub fn reference_objective(
    spec: &ObjectiveSpec,
    sequences: &[BatchSequence],
    frozen: &[Vec<f64>],
    live: &TabularPolicy,
) -> Result<f64> {
    let ratios = token_ratios(live, sequences)?;
    let (lo, hi) = spec.clip_bounds();
    let total_tokens: usize = sequences.iter().map(|s| s.len()).sum();
    let g = sequences.len() as f64;
    let mut j = 0.0;
    for ((seq, live_r), frozen_r) in sequences.iter().zip(&ratios).zip(frozen) {
        let adv = seq.advantage;
        let token_sum: f64 = match spec.algorithm {
            Algorithm::Ppo | Algorithm::Grpo | Algorithm::Dapo => {
                live_r.iter().map(|&d| (d * adv).min(clip(d, lo, hi) * adv)).sum()
            }
            Algorithm::CeGppo => live_r
                .iter()
                .zip(frozen_r)
                .map(|(&d, &d0)| {
                    if d0 < lo && adv < 0.0 {
                        spec.beta1 * (lo / d0) * d * adv
                    } else if d0 > hi && adv > 0.0 {
                        spec.beta2 * (hi / d0) * d * adv
                    } else {
                        d * adv
                    }
                })
                .sum(),
            Algorithm::Cispo => live_r
                .iter()
                .zip(frozen_r)
                .map(|(&d, &d0)| clip(d0, lo, hi) / d0 * d * adv)
                .sum(),
            Algorithm::Gspo => {
                let n = live_r.len() as f64;
                let s = (live_r.iter().map(|d| d.ln()).sum::<f64>() / n).exp();
                (s * adv).min(clip(s, lo, hi) * adv)
            }
        };
        let weight = match spec.aggregation {
            Aggregation::SequenceMean => 1.0 / (g * seq.len() as f64),
            Aggregation::TokenMean => 1.0 / total_tokens as f64,
        };
        j += weight * token_sum;
    }
    if spec.alpha > 0.0 {
        let mut h = 0.0;
        for seq in sequences {
            for &s in &seq.states {
                h += entropy_of(&live.action_probabilities(s)?);
            }
        }
        j += spec.alpha * h / total_tokens as f64;
    }
    Ok(j)
}

/// Compares the analytic gradient of `spec` at `policy` with central
/// differences of [`reference_objective`].
pub fn check_objective_gradient(
    spec: &ObjectiveSpec,
    sequences: &[BatchSequence],
    policy: &TabularPolicy,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let analytic = evaluate_surrogate(spec, policy, sequences)?;
    let mut coverage = BranchCoverage::default();
    for r in &analytic.records {
        coverage.add(r.branch);
    }
    if coverage.min() < config.min_branch_hits {
        return Err(LabError::GradCheck(format!(
            "branch coverage {coverage:?} below {} hits per branch",
            config.min_branch_hits
        )));
    }

    let frozen = token_ratios(policy, sequences)?;
    let (lo, hi) = spec.clip_bounds();
    let near = |d: f64| {
        let margin = config.boundary_margin * config.step * d.max(1.0);
        (d - lo).abs() <= margin || (d - hi).abs() <= margin
    };
    let mut excluded = BTreeSet::new();
    for (seq, ratios) in sequences.iter().zip(&frozen) {
        if spec.algorithm == Algorithm::Gspo {
            let n = ratios.len() as f64;
            let s = (ratios.iter().map(|d| d.ln()).sum::<f64>() / n).exp();
            if near(s) {
                excluded.extend(seq.states.iter().copied());
            }
        } else {
            for (&d, &s) in ratios.iter().zip(&seq.states) {
                if near(d) {
                    excluded.insert(s);
                }
            }
        }
    }

    let numeric = numeric_gradient(
        |p| reference_objective(spec, sequences, &frozen, p).unwrap_or(f64::NAN),
        policy,
        config.step,
    )?;

    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    let mut worst = (0, 0);
    let mut worst_score = f64::NEG_INFINITY;
    let mut checked = 0;
    let mut passed = numeric.non_finite.is_empty();
    for ((s, a), &g) in analytic.gradient.indexed_iter() {
        if excluded.contains(&s) || numeric.non_finite.contains(&(s, a)) {
            continue;
        }
        checked += 1;
        let n = numeric.gradient[(s, a)];
        let abs = (g - n).abs();
        let rel = if abs <= config.abs_tol { 0.0 } else { abs / g.abs().max(n.abs()) };
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(rel);
        if rel > config.rel_tol {
            passed = false;
        }
        let score = if rel > 0.0 { 1.0 + rel } else { abs };
        if score > worst_score {
            worst_score = score;
            worst = (s, a);
        }
    }
    if checked == 0 {
        passed = false;
    }
    Ok(GradCheckReport {
        algorithm: spec.algorithm,
        max_abs_error: max_abs,
        max_rel_error: max_rel,
        worst_coordinate: worst,
        coverage,
        coordinates_checked: checked,
        excluded_states: excluded.into_iter().collect(),
        non_finite_coordinates: numeric.non_finite,
        passed,
    })
}

/// Where a constructed token's ratio should land relative to the clip interval.
#[derive(Debug, Clone, Copy)]
enum Zone {
    Below,
    Inside,
    Above,
}

fn ratio_in_zone(rng: &mut StreamRng, zone: Zone, lo: f64, hi: f64, margin: f64) -> f64 {
    match zone {
        Zone::Below => rng.gen_range(0.35 * lo..lo - margin),
        Zone::Inside => rng.gen_range(lo + margin..hi - margin),
        Zone::Above => rng.gen_range(hi + margin..hi * 2.0),
    }
}

/// Random live policy for gradient checks.
pub fn random_policy(num_states: usize, num_actions: usize, scale: f64, rng: &mut StreamRng) -> Result<TabularPolicy> {
    let logits = Array2::from_shape_fn((num_states, num_actions), |_| scale * (rng.gen::<f64>() * 2.0 - 1.0));
    TabularPolicy::from_logits(logits)
}

/// Builds a batch whose ratios against `policy` are chosen by construction so
/// that every branch of `spec` is hit, every ratio sits well clear of the clip
/// kinks and every implied rollout probability is a valid probability.
///
/// Sequences cycle through (advantage sign x zone) classes, so any
/// `num_sequences >= 12` covers all three branches of every algorithm.
pub fn branch_covering_batch(
    spec: &ObjectiveSpec,
    policy: &TabularPolicy,
    num_sequences: usize,
    max_len: usize,
    rng: &mut StreamRng,
) -> Result<Vec<BatchSequence>> {
    if max_len < 2 {
        return Err(LabError::input("max_len must be at least 2"));
    }
    let (lo, hi) = spec.clip_bounds();
    // Keeps constructed ratios far from the kinks; GSPO's interval is only
    // 7e-4 wide so it gets a tighter margin.
    let margin = if spec.algorithm == Algorithm::Gspo { 1e-4 } else { 0.02 };
    let zones = [Zone::Below, Zone::Inside, Zone::Above];
    let mut out = Vec::with_capacity(num_sequences);
    for i in 0..num_sequences {
        let sign = if (i / 3) % 2 == 0 { -1.0 } else { 1.0 };
        let advantage = sign * rng.gen_range(0.2..2.0);
        let len = rng.gen_range(2..=max_len);
        let seq_zone = zones[i % 3];
        let ratios: Vec<f64> = if spec.algorithm == Algorithm::Gspo {
            let s = ratio_in_zone(rng, seq_zone, lo, hi, margin);
            let mut logs: Vec<f64> = (0..len).map(|_| rng.gen_range(-0.3..0.3)).collect();
            let shift = s.ln() - logs.iter().sum::<f64>() / len as f64;
            logs.iter_mut().for_each(|l| *l += shift);
            logs.into_iter().map(f64::exp).collect()
        } else {
            // First token lands in the sequence's zone; the rest are mixed.
            (0..len)
                .map(|t| {
                    let zone = if t == 0 { seq_zone } else { zones[rng.gen_range(0..3)] };
                    ratio_in_zone(rng, zone, lo, hi, margin)
                })
                .collect()
        };
        let mut states = Vec::with_capacity(len);
        let mut actions = Vec::with_capacity(len);
        let mut old_logprobs = Vec::with_capacity(len);
        for &d in &ratios {
            // old = live / d must be a probability.
            let (s, a, lp) = loop {
                let s = rng.gen_range(0..policy.num_states());
                let a = rng.gen_range(0..policy.num_actions());
                let lp = policy.log_prob(s, a)?;
                if lp - d.ln() < -1e-3 {
                    break (s, a, lp);
                }
            };
            states.push(s);
            actions.push(a);
            old_logprobs.push(lp - d.ln());
        }
        out.push(BatchSequence {
            states,
            actions,
            old_logprobs,
            advantage,
        });
    }
    Ok(out)
}

/// Gradient check of `spec` on a random policy and a branch-covering batch
/// drawn from `seed`.
pub fn check_with_random_batch(
    spec: &ObjectiveSpec,
    seed: u64,
    num_sequences: usize,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut rng = stream(seed, "gradcheck", spec.algorithm as u64);
    let policy = random_policy(10, 5, 1.0, &mut rng)?;
    let batch = branch_covering_batch(spec, &policy, num_sequences, 6, &mut rng)?;
    check_objective_gradient(spec, &batch, &policy, config)
}
