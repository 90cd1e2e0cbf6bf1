//! Entropy dynamics: the covariance predictor of one-step entropy change and
//! the advantage-sign x probability token taxonomy.
//!
//! For a softmax row with logits `z` and the idealized update
//! `z += eta * pi * A` (advantages centered under `pi`), the entropy change is
//! `-eta * Cov_{a~pi}(ln pi(a), pi(a) A(a))` to first order in `eta`. This
//! module computes both sides exactly so the approximation can be measured.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::advantage::{normalize_rewards, AdvantageOutcome, DegeneratePolicy};
use crate::env::RolloutRecord;
use crate::error::{LabError, Result};
use crate::objectives::{ObjectiveSpec, TokenRecord};
use crate::policy::{entropy_of, softmax, TabularPolicy};

/// Largest `|E_pi[A]|` accepted as centered.
pub const CENTERING_TOL: f64 = 1e-9;
/// Rows with less entropy than this are outside the smooth regime.
pub const DEGENERATE_ENTROPY: f64 = 1e-6;

/// `Cov_{a~pi}(ln pi(a), pi(a) A(a))` as `E[XY] - E[X] E[Y]`.
pub fn logprob_covariance(probs: &[f64], advantages: &[f64]) -> f64 {
    let mut exy = 0.0;
    let mut ex = 0.0;
    let mut ey = 0.0;
    for (&p, &a) in probs.iter().zip(advantages) {
        if p == 0.0 {
            continue;
        }
        let x = p.ln();
        let y = p * a;
        exy += p * x * y;
        ex += p * x;
        ey += p * y;
    }
    exy - ex * ey
}

/// `-eta * Cov`, the first-order entropy change.
pub fn predicted_entropy_change(probs: &[f64], advantages: &[f64], eta: f64) -> f64 {
    -eta * logprob_covariance(probs, advantages)
}

/// Exact entropy change of the row `logits` under `z += eta * pi * A`.
pub fn idealized_update_entropy_change(logits: &[f64], advantages: &[f64], eta: f64) -> f64 {
    let probs = softmax(ndarray::ArrayView1::from(logits));
    let updated: Vec<f64> = logits
        .iter()
        .zip(&probs)
        .zip(advantages)
        .map(|((z, p), a)| z + eta * p * a)
        .collect();
    entropy_of(&softmax(ndarray::ArrayView1::from(&updated[..]))) - entropy_of(&probs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    /// The update the covariance formula is derived for.
    Idealized,
    /// An arbitrary (e.g. clipped-surrogate) update scored with the same
    /// first-order formula; outside the derivation's stated assumptions.
    Extrapolated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyPrediction {
    pub state: usize,
    pub eta: f64,
    pub covariance: f64,
    pub predicted_delta_h: f64,
    pub actual_delta_h: f64,
    pub abs_error: f64,
    pub mode: PredictionMode,
}

fn check_advantages(policy: &TabularPolicy, state: usize, advantages: &[f64]) -> Result<Vec<f64>> {
    let probs = policy.action_probabilities(state)?;
    if advantages.len() != probs.len() {
        return Err(LabError::input(format!(
            "{} advantages for {} actions",
            advantages.len(),
            probs.len()
        )));
    }
    if advantages.iter().any(|a| !a.is_finite()) {
        return Err(LabError::input("non-finite advantage"));
    }
    Ok(probs)
}

/// Subtracts `E_pi[A]` so the advantages are centered under `probs`.
pub fn center_advantages(probs: &[f64], advantages: &[f64]) -> Vec<f64> {
    let mean: f64 = probs.iter().zip(advantages).map(|(p, a)| p * a).sum();
    advantages.iter().map(|a| a - mean).collect()
}

/// Predicted and exact entropy change at `state` under the idealized update.
pub fn predict_entropy_change(policy: &TabularPolicy, state: usize, advantages: &[f64], eta: f64) -> Result<EntropyPrediction> {
    let probs = check_advantages(policy, state, advantages)?;
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(LabError::input(format!("eta must be positive, got {eta}")));
    }
    let residual: f64 = probs.iter().zip(advantages).map(|(p, a)| p * a).sum();
    if residual.abs() >= CENTERING_TOL {
        return Err(LabError::input(format!(
            "advantages are not centered under the policy: E_pi[A] = {residual:e}"
        )));
    }
    let logits = policy.logits().row(state).to_vec();
    let covariance = logprob_covariance(&probs, advantages);
    let predicted = -eta * covariance;
    let actual = idealized_update_entropy_change(&logits, advantages, eta);
    Ok(EntropyPrediction {
        state,
        eta,
        covariance,
        predicted_delta_h: predicted,
        actual_delta_h: actual,
        abs_error: (actual - predicted).abs(),
        mode: PredictionMode::Idealized,
    })
}

/// First-order entropy change of every row touched by `z += learning_rate * gradient`.
///
/// The covariance field is the implied `-predicted / learning_rate`.
pub fn predict_for_update(
    before: &TabularPolicy,
    gradient: &ndarray::Array2<f64>,
    learning_rate: f64,
) -> Result<Vec<EntropyPrediction>> {
    if gradient.dim() != before.logits().dim() {
        return Err(LabError::input("gradient shape differs from the policy"));
    }
    let mut after = before.clone();
    after.apply_gradient(gradient, learning_rate)?;
    let mut out = Vec::new();
    for s in 0..before.num_states() {
        let row = gradient.row(s);
        if row.iter().all(|&g| g == 0.0) {
            continue;
        }
        let probs = before.action_probabilities(s)?;
        let h = entropy_of(&probs);
        // dH/dz_a = -pi_a (ln pi_a + H)
        let predicted: f64 = probs
            .iter()
            .zip(row.iter())
            .filter(|(&p, _)| p > 0.0)
            .map(|(&p, &g)| -p * (p.ln() + h) * learning_rate * g)
            .sum();
        let actual = after.exact_entropy(s)? - h;
        out.push(EntropyPrediction {
            state: s,
            eta: learning_rate,
            covariance: -predicted / learning_rate,
            predicted_delta_h: predicted,
            actual_delta_h: actual,
            abs_error: (actual - predicted).abs(),
            mode: PredictionMode::Extrapolated,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "detail")]
pub enum ConvergenceStatus {
    /// Errors shrink quadratically.
    Converged,
    /// Vacuous or outside the smooth regime; excluded from pass/fail.
    Degenerate(String),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub state: usize,
    pub etas: Vec<f64>,
    pub errors: Vec<f64>,
    /// `errors[k] / errors[k + 1]`.
    pub ratios: Vec<f64>,
    pub status: ConvergenceStatus,
}

/// Ratio band for the error when `eta` halves.
pub const QUADRATIC_BAND: (f64, f64) = (3.0, 5.0);

/// Checks that `|actual - predicted|` shrinks by about 4x each time `eta`
/// halves, over the final two consecutive pairs.
pub fn verify_predictor_convergence(
    policy: &TabularPolicy,
    state: usize,
    advantages: &[f64],
    etas: &[f64],
) -> Result<ConvergenceReport> {
    if etas.len() < 4 {
        return Err(LabError::input(format!("need at least 4 step sizes, got {}", etas.len())));
    }
    for w in etas.windows(2) {
        if !(w[0] > 0.0) || ((w[1] / w[0]) - 0.5).abs() > 1e-12 {
            return Err(LabError::input(format!("step sizes must halve each time, got {etas:?}")));
        }
    }
    let probs = check_advantages(policy, state, advantages)?;
    let report = |errors: Vec<f64>, ratios: Vec<f64>, status| ConvergenceReport {
        state,
        etas: etas.to_vec(),
        errors,
        ratios,
        status,
    };
    if advantages.iter().all(|&a| a == 0.0) {
        return Ok(report(
            vec![0.0; etas.len()],
            Vec::new(),
            ConvergenceStatus::Degenerate("zero advantages".into()),
        ));
    }
    let h = entropy_of(&probs);
    if h < DEGENERATE_ENTROPY {
        return Ok(report(
            Vec::new(),
            Vec::new(),
            ConvergenceStatus::Degenerate(format!("near-deterministic row, entropy {h:e}")),
        ));
    }
    let errors = etas
        .iter()
        .map(|&eta| predict_entropy_change(policy, state, advantages, eta).map(|p| p.abs_error))
        .collect::<Result<Vec<f64>>>()?;
    let ratios: Vec<f64> = errors.windows(2).map(|w| w[0] / w[1]).collect();
    let (lo, hi) = QUADRATIC_BAND;
    let tail = &ratios[ratios.len() - 2..];
    let status = if tail.iter().all(|r| (lo..=hi).contains(r)) {
        ConvergenceStatus::Converged
    } else {
        ConvergenceStatus::Failed(format!("error ratios {ratios:?} leave [{lo}, {hi}]"))
    };
    Ok(report(errors, ratios, status))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Quadrant {
    /// Positive advantage, high probability.
    #[serde(rename = "pa_hp")]
    PaHp,
    /// Negative advantage, low probability.
    #[serde(rename = "na_lp")]
    NaLp,
    /// Positive advantage, low probability.
    #[serde(rename = "pa_lp")]
    PaLp,
    /// Negative advantage, high probability.
    #[serde(rename = "na_hp")]
    NaHp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipFlag {
    Unclipped,
    /// Ratio below the interval with negative advantage.
    Left,
    /// Ratio above the interval with positive advantage.
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenClass {
    /// `None` for zero-advantage tokens.
    pub quadrant: Option<Quadrant>,
    pub clip: ClipFlag,
}

pub fn classify_token(delta: f64, adv: f64, prob: f64, eps_low: f64, eps_high: f64, prob_threshold: f64) -> Result<TokenClass> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(LabError::input(format!("ratio must be positive, got {delta}")));
    }
    if !(prob > 0.0 && prob <= 1.0) {
        return Err(LabError::input(format!("probability must lie in (0, 1], got {prob}")));
    }
    let high = prob >= prob_threshold;
    let quadrant = if adv > 0.0 {
        Some(if high { Quadrant::PaHp } else { Quadrant::PaLp })
    } else if adv < 0.0 {
        Some(if high { Quadrant::NaHp } else { Quadrant::NaLp })
    } else {
        None
    };
    let clip = if delta < 1.0 - eps_low && adv < 0.0 {
        ClipFlag::Left
    } else if delta > 1.0 + eps_high && adv > 0.0 {
        ClipFlag::Right
    } else {
        ClipFlag::Unclipped
    };
    Ok(TokenClass { quadrant, clip })
}

pub const HISTOGRAM_BINS: usize = 40;
/// Bins span `ln delta` in `[-3, 3]`.
pub const HISTOGRAM_LOG_RANGE: f64 = 3.0;

/// Log-spaced histogram of ratios: 40 equal bins in `ln delta` over
/// `[-3, 3]`, plus underflow and overflow counts. The top edge belongs to the
/// last bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub underflow: usize,
    pub overflow: usize,
}

impl Default for RatioHistogram {
    fn default() -> Self {
        let width = 2.0 * HISTOGRAM_LOG_RANGE / HISTOGRAM_BINS as f64;
        Self {
            edges: (0..=HISTOGRAM_BINS)
                .map(|k| (-HISTOGRAM_LOG_RANGE + width * k as f64).exp())
                .collect(),
            counts: vec![0; HISTOGRAM_BINS],
            underflow: 0,
            overflow: 0,
        }
    }
}

impl RatioHistogram {
    pub fn add(&mut self, delta: f64) {
        let x = delta.ln();
        if x < -HISTOGRAM_LOG_RANGE {
            self.underflow += 1;
        } else if x > HISTOGRAM_LOG_RANGE {
            self.overflow += 1;
        } else {
            let width = 2.0 * HISTOGRAM_LOG_RANGE / HISTOGRAM_BINS as f64;
            let k = (((x + HISTOGRAM_LOG_RANGE) / width) as usize).min(HISTOGRAM_BINS - 1);
            self.counts[k] += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrantStats {
    pub total: usize,
    pub neutral: usize,
    pub pa_hp: usize,
    pub na_lp: usize,
    pub pa_lp: usize,
    pub na_hp: usize,
    /// Fractions over tokens with nonzero advantage.
    pub frac_pa_hp: f64,
    pub frac_na_lp: f64,
    pub frac_pa_lp: f64,
    pub frac_na_hp: f64,
    /// Fractions over all tokens.
    pub left_clip_fraction: f64,
    pub right_clip_fraction: f64,
    pub clipped: usize,
    /// Mean rollout-time probability of clipped and unclipped tokens; NaN when empty.
    pub mean_prob_clipped: f64,
    pub mean_prob_unclipped: f64,
    pub histogram: RatioHistogram,
}

/// How the high/low probability split is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbThreshold {
    /// `1 / V` for a vocabulary of V actions.
    Uniform,
    Fixed(f64),
}

impl ProbThreshold {
    pub fn value(self, num_actions: usize) -> f64 {
        match self {
            ProbThreshold::Uniform => 1.0 / num_actions as f64,
            ProbThreshold::Fixed(t) => t,
        }
    }
}

/// Running quadrant tallies; merge order never changes the result.
#[derive(Debug, Clone, Default)]
pub struct QuadrantAccumulator {
    counts: BTreeMap<Quadrant, usize>,
    total: usize,
    neutral: usize,
    left: usize,
    right: usize,
    prob_clipped: f64,
    prob_unclipped: f64,
    histogram: RatioHistogram,
}

impl QuadrantAccumulator {
    pub fn add(&mut self, record: &TokenRecord, eps_low: f64, eps_high: f64, threshold: f64) -> Result<()> {
        let prob = record.old_prob();
        let class = classify_token(record.ratio, record.advantage, prob, eps_low, eps_high, threshold)?;
        self.total += 1;
        match class.quadrant {
            Some(q) => *self.counts.entry(q).or_default() += 1,
            None => self.neutral += 1,
        }
        match class.clip {
            ClipFlag::Left => self.left += 1,
            ClipFlag::Right => self.right += 1,
            ClipFlag::Unclipped => {}
        }
        if class.clip == ClipFlag::Unclipped {
            self.prob_unclipped += prob;
        } else {
            self.prob_clipped += prob;
        }
        self.histogram.add(record.ratio);
        Ok(())
    }

    pub fn finish(&self) -> QuadrantStats {
        let get = |q| self.counts.get(&q).copied().unwrap_or(0);
        let signed = (self.total - self.neutral) as f64;
        let frac = |n: usize| if signed > 0.0 { n as f64 / signed } else { 0.0 };
        let all = |n: usize| if self.total > 0 { n as f64 / self.total as f64 } else { 0.0 };
        let clipped = self.left + self.right;
        let unclipped = self.total - clipped;
        let mean = |sum: f64, n: usize| if n > 0 { sum / n as f64 } else { f64::NAN };
        QuadrantStats {
            total: self.total,
            neutral: self.neutral,
            pa_hp: get(Quadrant::PaHp),
            na_lp: get(Quadrant::NaLp),
            pa_lp: get(Quadrant::PaLp),
            na_hp: get(Quadrant::NaHp),
            frac_pa_hp: frac(get(Quadrant::PaHp)),
            frac_na_lp: frac(get(Quadrant::NaLp)),
            frac_pa_lp: frac(get(Quadrant::PaLp)),
            frac_na_hp: frac(get(Quadrant::NaHp)),
            left_clip_fraction: all(self.left),
            right_clip_fraction: all(self.right),
            clipped,
            mean_prob_clipped: mean(self.prob_clipped, clipped),
            mean_prob_unclipped: mean(self.prob_unclipped, unclipped),
            histogram: self.histogram.clone(),
        }
    }
}

/// Quadrant and clip statistics over a batch of evaluated tokens.
pub fn batch_quadrant_stats(
    records: &[TokenRecord],
    spec: &ObjectiveSpec,
    num_actions: usize,
    threshold: ProbThreshold,
) -> Result<QuadrantStats> {
    let (lo, hi) = spec.clip_bounds();
    let t = threshold.value(num_actions);
    let mut acc = QuadrantAccumulator::default();
    for r in records {
        acc.add(r, 1.0 - lo, hi - 1.0, t)?;
    }
    Ok(acc.finish())
}

/// Mean of per-state predictions weighted by how often each state was visited.
pub fn visitation_weighted_mean(predictions: &[EntropyPrediction], visits: &BTreeMap<usize, usize>) -> (f64, f64) {
    let mut w = 0.0;
    let mut pred = 0.0;
    let mut act = 0.0;
    for p in predictions {
        let c = visits.get(&p.state).copied().unwrap_or(0) as f64;
        w += c;
        pred += c * p.predicted_delta_h;
        act += c * p.actual_delta_h;
    }
    if w == 0.0 {
        (0.0, 0.0)
    } else {
        (pred / w, act / w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogAnalysis {
    pub tokens: usize,
    pub groups: usize,
    pub quadrants: QuadrantStats,
    /// Per-state predictions from empirical per-action advantages, centered
    /// under the checkpoint policy. Empty without a checkpoint.
    pub predictions: Vec<EntropyPrediction>,
    pub visitation_weighted_predicted_delta_h: f64,
    pub visitation_weighted_actual_delta_h: f64,
}

/// Offline analysis of a rollout log.
///
/// Advantages are recomputed per `(step, group)` (degenerate groups get
/// zero). Ratios are taken against `policy` when given and are 1 otherwise.
/// With a policy, each visited state's per-action advantage is the mean
/// advantage of the logged tokens taking that action (0 if unseen), centered
/// under the policy, and fed to [`predict_entropy_change`] with step `eta`.
pub fn analyze_rollout_log(
    records: &[RolloutRecord],
    policy: Option<&TabularPolicy>,
    spec: &ObjectiveSpec,
    threshold: ProbThreshold,
    eta: f64,
) -> Result<LogAnalysis> {
    let mut groups: BTreeMap<(usize, usize), Vec<&RolloutRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.step, r.group)).or_default().push(r);
    }
    let (lo, hi) = spec.clip_bounds();
    let mut acc = QuadrantAccumulator::default();
    let mut sums: BTreeMap<usize, Vec<(f64, usize)>> = BTreeMap::new();
    let mut visits: BTreeMap<usize, usize> = BTreeMap::new();
    let mut tokens = 0;
    let mut num_actions = None;
    for members in groups.values() {
        let rewards: Vec<f64> = members.iter().map(|r| r.reward).collect();
        let advantages = if rewards.len() < 2 {
            vec![0.0; rewards.len()]
        } else {
            match normalize_rewards(&rewards, DegeneratePolicy::Zero)? {
                AdvantageOutcome::Kept(a) => a.values,
                AdvantageOutcome::Filtered { .. } => vec![0.0; rewards.len()],
            }
        };
        for (record, &adv) in members.iter().zip(&advantages) {
            let traj = record.to_trajectory()?;
            let v = record.vocab_size;
            num_actions = Some(v);
            if let Some(p) = policy {
                if p.shape() != (traj.task.env.num_states(), v) {
                    return Err(LabError::input("checkpoint shape does not match the logged task"));
                }
            }
            for t in 0..traj.len() {
                let (s, a, old) = (traj.states[t], traj.actions[t], traj.old_logprobs[t]);
                let new = match policy {
                    Some(p) => p.log_prob(s, a)?,
                    None => old,
                };
                let rec = TokenRecord {
                    state: s,
                    action: a,
                    old_logprob: old,
                    new_logprob: new,
                    ratio: (new - old).exp(),
                    advantage: adv,
                    branch: crate::objectives::Branch::InteriorOrPessimistic,
                };
                acc.add(&rec, 1.0 - lo, hi - 1.0, threshold.value(v))?;
                let row = sums.entry(s).or_insert_with(|| vec![(0.0, 0); v]);
                row[a].0 += adv;
                row[a].1 += 1;
                *visits.entry(s).or_default() += 1;
                tokens += 1;
            }
        }
    }
    let mut predictions = Vec::new();
    if let (Some(p), Some(_)) = (policy, num_actions) {
        for (&s, row) in &sums {
            let raw: Vec<f64> = row.iter().map(|&(sum, n)| if n > 0 { sum / n as f64 } else { 0.0 }).collect();
            let probs = p.action_probabilities(s)?;
            let centered = center_advantages(&probs, &raw);
            let residual: f64 = probs.iter().zip(&centered).map(|(p, a)| p * a).sum();
            if residual.abs() >= CENTERING_TOL || entropy_of(&probs) < DEGENERATE_ENTROPY {
                continue;
            }
            predictions.push(predict_entropy_change(p, s, &centered, eta)?);
        }
    }
    let (wp, wa) = visitation_weighted_mean(&predictions, &visits);
    Ok(LogAnalysis {
        tokens,
        groups: groups.len(),
        quadrants: acc.finish(),
        predictions,
        visitation_weighted_predicted_delta_h: wp,
        visitation_weighted_actual_delta_h: wa,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::Branch;
    use crate::rng::stream;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::Rng;

    fn row_policy(logits: &[f64]) -> TabularPolicy {
        TabularPolicy::from_logits(Array2::from_shape_vec((1, logits.len()), logits.to_vec()).unwrap()).unwrap()
    }

    /// `sum_a pi (X - E X)(Y - E Y)`
    fn definitional_covariance(probs: &[f64], adv: &[f64]) -> f64 {
        let x: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        let y: Vec<f64> = probs.iter().zip(adv).map(|(p, a)| p * a).collect();
        let ex: f64 = probs.iter().zip(&x).map(|(p, x)| p * x).sum();
        let ey: f64 = probs.iter().zip(&y).map(|(p, y)| p * y).sum();
        probs.iter().zip(x.iter().zip(&y)).map(|(p, (x, y))| p * (x - ex) * (y - ey)).sum()
    }

    #[test]
    fn uniform_row_has_zero_covariance() {
        let p = row_policy(&[0.0; 5]);
        let probs = p.action_probabilities(0).unwrap();
        let adv = center_advantages(&probs, &[1.0, -2.0, 0.5, 3.0, 0.0]);
        let pred = predict_entropy_change(&p, 0, &adv, 0.1).unwrap();
        assert_abs_diff_eq!(pred.covariance, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pred.predicted_delta_h, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn two_action_example() {
        // pi = (0.8, 0.2), A = (+1, -1)
        let logits = [4f64.ln(), 0.0];
        let probs = [0.8, 0.2];
        let adv = [1.0, -1.0];
        let cov = logprob_covariance(&probs, &adv);
        assert_abs_diff_eq!(cov, 0.2218, epsilon = 1e-4);
        let predicted = predicted_entropy_change(&probs, &adv, 0.01);
        assert_abs_diff_eq!(predicted, -0.002218, epsilon = 1e-6);
        let actual = idealized_update_entropy_change(&logits, &adv, 0.01);
        assert!((actual - predicted).abs() < 10.0 * 0.01f64.powi(2), "actual {actual} predicted {predicted}");

        // E_pi[A] = 0.6 here, so the checked entry point refuses it.
        let err = predict_entropy_change(&row_policy(&logits), 0, &adv, 0.01).unwrap_err();
        assert!(err.to_string().contains("E_pi[A] = 6.0"), "{err}");
    }

    #[test]
    fn low_probability_positive_advantage_raises_entropy() {
        let probs = [0.2, 0.8];
        assert!(logprob_covariance(&probs, &[1.0, -1.0]) < 0.0);
        let p = row_policy(&[0.0, 4f64.ln()]);
        let centered = center_advantages(&probs, &[1.0, -1.0]);
        let pred = predict_entropy_change(&p, 0, &centered, 0.01).unwrap();
        assert!(pred.covariance < 0.0);
        assert!(pred.predicted_delta_h > 0.0);
        assert!(pred.actual_delta_h > 0.0);
    }

    #[test]
    fn covariance_identity_on_random_inputs() {
        let mut rng = stream(3, "cov", 0);
        for _ in 0..1000 {
            let n = rng.gen_range(2..10);
            let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let probs = softmax(ndarray::ArrayView1::from(&z[..]));
            let adv: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            assert!((logprob_covariance(&probs, &adv) - definitional_covariance(&probs, &adv)).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_is_shift_invariant() {
        let mut rng = stream(4, "shift", 0);
        for _ in 0..200 {
            let z: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let c = rng.gen_range(-20.0..20.0);
            let zs: Vec<f64> = z.iter().map(|x| x + c).collect();
            let p = row_policy(&z);
            let probs = p.action_probabilities(0).unwrap();
            let adv = center_advantages(&probs, &(0..6).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
            let a = predict_entropy_change(&p, 0, &adv, 0.01).unwrap();
            let b = predict_entropy_change(&row_policy(&zs), 0, &adv, 0.01);
            // The shifted row may perturb E_pi[A] by rounding; compare the raw predictor.
            let pb = predicted_entropy_change(&row_policy(&zs).action_probabilities(0).unwrap(), &adv, 0.01);
            assert!((a.predicted_delta_h - pb).abs() < 1e-12);
            if let Ok(b) = b {
                assert!((a.predicted_delta_h - b.predicted_delta_h).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn convergence_on_random_row() {
        let mut rng = stream(5, "conv", 0);
        let p = row_policy(&(0..8).map(|_| rng.gen_range(-1.5..1.5)).collect::<Vec<_>>());
        let probs = p.action_probabilities(0).unwrap();
        let adv = center_advantages(&probs, &(0..8).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
        let r = verify_predictor_convergence(&p, 0, &adv, &[0.04, 0.02, 0.01, 0.005]).unwrap();
        assert_eq!(r.status, ConvergenceStatus::Converged, "{r:?}");
        for ratio in &r.ratios {
            assert!((3.0..=5.0).contains(ratio));
        }
    }

    #[test]
    fn convergence_degenerate_cases() {
        let p = row_policy(&[0.3, -0.2, 0.1]);
        let r = verify_predictor_convergence(&p, 0, &[0.0; 3], &[0.04, 0.02, 0.01, 0.005]).unwrap();
        assert!(matches!(r.status, ConvergenceStatus::Degenerate(_)));
        assert!(r.errors.iter().all(|&e| e == 0.0));

        let sharp = row_policy(&[40.0, 0.0, 0.0]);
        let probs = sharp.action_probabilities(0).unwrap();
        let adv = center_advantages(&probs, &[1.0, 0.0, -1.0]);
        let r = verify_predictor_convergence(&sharp, 0, &adv, &[0.04, 0.02, 0.01, 0.005]).unwrap();
        assert!(matches!(r.status, ConvergenceStatus::Degenerate(_)));

        assert!(verify_predictor_convergence(&p, 0, &[0.0; 3], &[0.04, 0.02, 0.01]).is_err());
        assert!(verify_predictor_convergence(&p, 0, &[0.0; 3], &[0.04, 0.03, 0.01, 0.005]).is_err());
    }

    #[test]
    fn classify_examples() {
        let c = classify_token(1.0, 1.0, 0.9, 0.2, 0.2, 0.125).unwrap();
        assert_eq!((c.quadrant, c.clip), (Some(Quadrant::PaHp), ClipFlag::Unclipped));
        let c = classify_token(1.5, 1.0, 0.05, 0.2, 0.2, 0.125).unwrap();
        assert_eq!((c.quadrant, c.clip), (Some(Quadrant::PaLp), ClipFlag::Right));
        let c = classify_token(0.5, -1.0, 0.05, 0.2, 0.2, 0.125).unwrap();
        assert_eq!((c.quadrant, c.clip), (Some(Quadrant::NaLp), ClipFlag::Left));
        let c = classify_token(0.5, 0.0, 0.05, 0.2, 0.2, 0.125).unwrap();
        assert_eq!(c.quadrant, None);
        assert!(classify_token(0.0, 1.0, 0.5, 0.2, 0.2, 0.1).is_err());
        assert!(classify_token(1.0, 1.0, 0.0, 0.2, 0.2, 0.1).is_err());
    }

    fn record(ratio: f64, advantage: f64, prob: f64) -> TokenRecord {
        TokenRecord {
            state: 0,
            action: 0,
            old_logprob: prob.ln(),
            new_logprob: prob.ln() + ratio.ln(),
            ratio,
            advantage,
            branch: Branch::InteriorOrPessimistic,
        }
    }

    #[test]
    fn batch_stats_examples() {
        let spec = ObjectiveSpec::ce_gppo(0.5, 1.0);
        let ones: Vec<TokenRecord> = (0..20).map(|i| record(1.0, if i % 2 == 0 { 1.0 } else { -1.0 }, 0.3)).collect();
        let s = batch_quadrant_stats(&ones, &spec, 8, ProbThreshold::Uniform).unwrap();
        assert_eq!((s.left_clip_fraction, s.right_clip_fraction), (0.0, 0.0));

        let mut mixed: Vec<TokenRecord> = (0..90).map(|_| record(1.0, 1.0, 0.3)).collect();
        mixed.extend((0..10).map(|_| record(1.5, 1.0, 0.05)));
        mixed.push(record(1.0, 0.0, 0.5));
        let s = batch_quadrant_stats(&mixed[..100], &spec, 8, ProbThreshold::Uniform).unwrap();
        assert_eq!(s.right_clip_fraction, 0.10);
        let s = batch_quadrant_stats(&mixed, &spec, 8, ProbThreshold::Uniform).unwrap();
        assert_eq!(s.neutral, 1);
        let fsum = s.frac_pa_hp + s.frac_na_lp + s.frac_pa_lp + s.frac_na_hp;
        assert_abs_diff_eq!(fsum, 1.0, epsilon = 1e-12);
        assert!(s.mean_prob_clipped < s.mean_prob_unclipped);
    }

    #[test]
    fn histogram_edges_and_overflow() {
        let mut h = RatioHistogram::default();
        assert_eq!(h.edges.len(), HISTOGRAM_BINS + 1);
        assert_abs_diff_eq!(h.edges[0], (-3f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(h.edges[HISTOGRAM_BINS], 3f64.exp(), epsilon = 1e-12);
        h.add(1.0);
        h.add(1e-3);
        h.add(1e3);
        h.add(3f64.exp());
        assert_eq!((h.underflow, h.overflow), (1, 1));
        assert_eq!(h.counts[HISTOGRAM_BINS / 2], 1);
        assert_eq!(h.counts[HISTOGRAM_BINS - 1], 1);
    }

    #[test]
    fn update_mode_matches_idealized_mode_on_idealized_step() {
        let p = row_policy(&[0.5, -0.3, 0.1, 1.0]);
        let probs = p.action_probabilities(0).unwrap();
        let adv = center_advantages(&probs, &[1.0, -0.5, 0.2, 0.0]);
        let ideal = predict_entropy_change(&p, 0, &adv, 0.02).unwrap();
        let grad = Array2::from_shape_fn((1, 4), |(_, a)| probs[a] * adv[a]);
        let extra = predict_for_update(&p, &grad, 0.02).unwrap();
        assert_eq!(extra.len(), 1);
        assert_eq!(extra[0].mode, PredictionMode::Extrapolated);
        assert_abs_diff_eq!(extra[0].predicted_delta_h, ideal.predicted_delta_h, epsilon = 1e-15);
        assert_abs_diff_eq!(extra[0].actual_delta_h, ideal.actual_delta_h, epsilon = 1e-15);
    }
}
