//! Per-token surrogate objectives and their gradients.
//!
//! Every objective here is expressed as a [`TokenTerm`]: the forward value a
//! token contributes to `J` and the scalar weight `F` that multiplies
//! `A * grad log pi` for that token in the backward pass. Stop-gradient
//! factors never appear in the backward pass, so the pair is the whole story:
//! a frozen `(1 - eps) / sg(delta)` factor turns into a constant weight.
//!
//! All values and gradients are for an objective to be maximized.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::env::Trajectory;
use crate::error::{LabError, Result};
use crate::policy::{entropy_of, softmax, TabularPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Ppo,
    Grpo,
    Dapo,
    Cispo,
    Gspo,
    CeGppo,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::Ppo,
        Algorithm::Grpo,
        Algorithm::Dapo,
        Algorithm::Cispo,
        Algorithm::Gspo,
        Algorithm::CeGppo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Ppo => "ppo",
            Algorithm::Grpo => "grpo",
            Algorithm::Dapo => "dapo",
            Algorithm::Cispo => "cispo",
            Algorithm::Gspo => "gspo",
            Algorithm::CeGppo => "ce_gppo",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| LabError::input(format!("unknown algorithm {s:?}")))
    }
}

/// How per-token values are normalized into the batch objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// `1/G sum_i 1/|y_i| sum_t`
    SequenceMean,
    /// `1/(sum_i |y_i|) sum_i sum_t`
    TokenMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub algorithm: Algorithm,
    /// Symmetric clip range (PPO, GRPO, CE-GPPO).
    pub eps: f64,
    /// Decoupled clip range (DAPO, CISPO, GSPO).
    pub eps_low: f64,
    pub eps_high: f64,
    /// CE-GPPO weight on tokens left of the clip interval with negative advantage.
    pub beta1: f64,
    /// CE-GPPO weight on tokens right of the clip interval with positive advantage.
    pub beta2: f64,
    /// Entropy bonus coefficient.
    pub alpha: f64,
    pub aggregation: Aggregation,
}

impl ObjectiveSpec {
    fn base(algorithm: Algorithm, aggregation: Aggregation) -> Self {
        Self {
            algorithm,
            eps: 0.2,
            eps_low: 0.2,
            eps_high: 0.2,
            beta1: 0.0,
            beta2: 0.0,
            alpha: 0.0,
            aggregation,
        }
    }

    pub fn ppo() -> Self {
        Self::base(Algorithm::Ppo, Aggregation::SequenceMean)
    }

    pub fn grpo() -> Self {
        Self::base(Algorithm::Grpo, Aggregation::SequenceMean)
    }

    pub fn dapo() -> Self {
        Self {
            eps_high: 0.28,
            ..Self::base(Algorithm::Dapo, Aggregation::TokenMean)
        }
    }

    pub fn cispo() -> Self {
        Self::base(Algorithm::Cispo, Aggregation::TokenMean)
    }

    pub fn gspo() -> Self {
        Self {
            eps_low: 3e-4,
            eps_high: 4e-4,
            ..Self::base(Algorithm::Gspo, Aggregation::SequenceMean)
        }
    }

    pub fn ce_gppo(beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            ..Self::base(Algorithm::CeGppo, Aggregation::TokenMean)
        }
    }

    pub fn for_algorithm(algorithm: Algorithm) -> Self {
        match algorithm {
            Algorithm::Ppo => Self::ppo(),
            Algorithm::Grpo => Self::grpo(),
            Algorithm::Dapo => Self::dapo(),
            Algorithm::Cispo => Self::cispo(),
            Algorithm::Gspo => Self::gspo(),
            Algorithm::CeGppo => Self::ce_gppo(0.5, 1.0),
        }
    }

    pub fn with_alpha(self, alpha: f64) -> Self {
        Self { alpha, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !open_unit(self.eps) {
            return Err(LabError::config(format!("eps must lie in (0, 1), got {}", self.eps)));
        }
        if !open_unit(self.eps_low) {
            return Err(LabError::config(format!("eps_low must lie in (0, 1), got {}", self.eps_low)));
        }
        if !(self.eps_high > 0.0 && self.eps_high.is_finite()) {
            return Err(LabError::config(format!("eps_high must be positive, got {}", self.eps_high)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2), ("alpha", self.alpha)] {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(LabError::config(format!("{name} must be finite and >= 0, got {b}")));
            }
        }
        Ok(())
    }

    /// Ratio interval `(lower, upper)` outside which this algorithm clips.
    pub fn clip_bounds(&self) -> (f64, f64) {
        match self.algorithm {
            Algorithm::Ppo | Algorithm::Grpo | Algorithm::CeGppo => (1.0 - self.eps, 1.0 + self.eps),
            Algorithm::Dapo | Algorithm::Cispo | Algorithm::Gspo => (1.0 - self.eps_low, 1.0 + self.eps_high),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    LeftClipped,
    RightClipped,
    InteriorOrPessimistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenTerm {
    /// Forward contribution to `J`.
    pub value: f64,
    /// `F` in `F * A * grad log pi`.
    pub grad_weight: f64,
    pub branch: Branch,
}

fn check_ratio(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(LabError::input(format!("importance ratio must be positive and finite, got {delta}")));
    }
    Ok(())
}

/// `min(delta * A, clip(delta, lower, upper) * A)`.
///
/// The clipped branch only wins when the ratio has moved past a bound in the
/// direction the advantage favours; in the two mismatch quadrants the raw
/// `delta * A` is the smaller term and keeps its gradient.
pub fn clipped_surrogate_term(delta: f64, adv: f64, lower: f64, upper: f64) -> Result<TokenTerm> {
    check_ratio(delta)?;
    Ok(if delta < lower && adv < 0.0 {
        TokenTerm {
            value: lower * adv,
            grad_weight: 0.0,
            branch: Branch::LeftClipped,
        }
    } else if delta > upper && adv > 0.0 {
        TokenTerm {
            value: upper * adv,
            grad_weight: 0.0,
            branch: Branch::RightClipped,
        }
    } else {
        TokenTerm {
            value: delta * adv,
            grad_weight: delta,
            branch: Branch::InteriorOrPessimistic,
        }
    })
}

pub fn ppo_token_term(delta: f64, adv: f64, eps: f64) -> Result<TokenTerm> {
    clipped_surrogate_term(delta, adv, 1.0 - eps, 1.0 + eps)
}

pub fn dapo_token_term(delta: f64, adv: f64, eps_low: f64, eps_high: f64) -> Result<TokenTerm> {
    clipped_surrogate_term(delta, adv, 1.0 - eps_low, 1.0 + eps_high)
}

/// Gradient-preserving clip.
///
/// Clipped tokens keep a gradient through `beta * (1 -/+ eps) / sg(delta) * delta`;
/// the frozen denominator cancels the ratio in the backward pass, leaving a
/// constant weight `beta1 * (1 - eps)` or `beta2 * (1 + eps)` however far the
/// ratio has drifted. Forward values are that expression evaluated at
/// `sg(delta) = delta`.
pub fn ce_gppo_token_term(delta: f64, adv: f64, eps: f64, beta1: f64, beta2: f64) -> Result<TokenTerm> {
    check_ratio(delta)?;
    Ok(if delta < 1.0 - eps && adv < 0.0 {
        let w = beta1 * (1.0 - eps);
        TokenTerm {
            value: w * adv,
            grad_weight: w,
            branch: Branch::LeftClipped,
        }
    } else if delta > 1.0 + eps && adv > 0.0 {
        let w = beta2 * (1.0 + eps);
        TokenTerm {
            value: w * adv,
            grad_weight: w,
            branch: Branch::RightClipped,
        }
    } else {
        TokenTerm {
            value: delta * adv,
            grad_weight: delta,
            branch: Branch::InteriorOrPessimistic,
        }
    })
}

/// Clipped importance weight treated as a constant: `sg(clip(delta)) * A * log pi`.
pub fn cispo_token_term(delta: f64, adv: f64, eps_low: f64, eps_high: f64) -> Result<TokenTerm> {
    check_ratio(delta)?;
    let (lower, upper) = (1.0 - eps_low, 1.0 + eps_high);
    let (w, branch) = if delta < lower {
        (lower, Branch::LeftClipped)
    } else if delta > upper {
        (upper, Branch::RightClipped)
    } else {
        (delta, Branch::InteriorOrPessimistic)
    };
    Ok(TokenTerm {
        value: w * adv,
        grad_weight: w,
        branch,
    })
}

/// Geometric mean of the token ratios, `exp(mean(ln delta_t))`.
pub fn sequence_ratio(token_ratios: &[f64]) -> Result<f64> {
    if token_ratios.is_empty() {
        return Err(LabError::input("sequence ratio of an empty sequence"));
    }
    for &d in token_ratios {
        check_ratio(d)?;
    }
    let mean_log = token_ratios.iter().map(|d| d.ln()).sum::<f64>() / token_ratios.len() as f64;
    Ok(mean_log.exp())
}

/// Sequence-level clipping on the geometric-mean ratio `s`.
///
/// The sequence term `min(s A, clip(s) A)` is spread evenly over its tokens:
/// each carries `1/|y|` of the value, and `d s = s/|y| * sum_t d ln pi_t`
/// gives each token a weight of `s/|y|` when unclipped.
pub fn gspo_sequence_terms(token_ratios: &[f64], adv: f64, eps_low: f64, eps_high: f64) -> Result<Vec<TokenTerm>> {
    let s = sequence_ratio(token_ratios)?;
    let seq = clipped_surrogate_term(s, adv, 1.0 - eps_low, 1.0 + eps_high)?;
    let n = token_ratios.len() as f64;
    let term = TokenTerm {
        value: seq.value / n,
        grad_weight: seq.grad_weight / n,
        branch: seq.branch,
    };
    Ok(vec![term; token_ratios.len()])
}

/// Token terms for one sequence under `spec`.
pub fn sequence_terms(spec: &ObjectiveSpec, token_ratios: &[f64], adv: f64) -> Result<Vec<TokenTerm>> {
    match spec.algorithm {
        Algorithm::Ppo | Algorithm::Grpo => token_ratios.iter().map(|&d| ppo_token_term(d, adv, spec.eps)).collect(),
        Algorithm::Dapo => token_ratios
            .iter()
            .map(|&d| dapo_token_term(d, adv, spec.eps_low, spec.eps_high))
            .collect(),
        Algorithm::Cispo => token_ratios
            .iter()
            .map(|&d| cispo_token_term(d, adv, spec.eps_low, spec.eps_high))
            .collect(),
        Algorithm::CeGppo => token_ratios
            .iter()
            .map(|&d| ce_gppo_token_term(d, adv, spec.eps, spec.beta1, spec.beta2))
            .collect(),
        Algorithm::Gspo => gspo_sequence_terms(token_ratios, adv, spec.eps_low, spec.eps_high),
    }
}

/// One response in an optimization batch: the tokens, where they were
/// emitted, their rollout-time log-probabilities and the broadcast advantage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSequence {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub old_logprobs: Vec<f64>,
    pub advantage: f64,
}

impl BatchSequence {
    pub fn from_trajectory(t: &Trajectory, advantage: f64) -> Self {
        Self {
            states: t.states.clone(),
            actions: t.actions.clone(),
            old_logprobs: t.old_logprobs.clone(),
            advantage,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn validate(&self, policy: &TabularPolicy) -> Result<()> {
        if self.is_empty() || self.states.len() != self.len() || self.old_logprobs.len() != self.len() {
            return Err(LabError::input("batch sequence is empty or its fields differ in length"));
        }
        if self.states.iter().any(|&s| s >= policy.num_states()) || self.actions.iter().any(|&a| a >= policy.num_actions()) {
            return Err(LabError::input("batch sequence indexes outside the policy table"));
        }
        if !self.advantage.is_finite() {
            return Err(LabError::input("non-finite advantage"));
        }
        Ok(())
    }
}

/// Softmax of every row, computed once per evaluation.
pub fn probability_table(policy: &TabularPolicy) -> Array2<f64> {
    let mut out = Array2::zeros(policy.logits().dim());
    for (s, row) in policy.logits().rows().into_iter().enumerate() {
        for (a, p) in softmax(row).into_iter().enumerate() {
            out[(s, a)] = p;
        }
    }
    out
}

/// Per-sequence weights `w_i` such that `J = sum_i w_i sum_t value_t`.
pub fn aggregation_weights(lengths: &[usize], mode: Aggregation) -> Result<Vec<f64>> {
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(LabError::input("aggregation needs a nonempty batch of nonempty sequences"));
    }
    Ok(match mode {
        Aggregation::SequenceMean => {
            let g = lengths.len() as f64;
            lengths.iter().map(|&n| 1.0 / (g * n as f64)).collect()
        }
        Aggregation::TokenMean => {
            let total = lengths.iter().sum::<usize>() as f64;
            vec![1.0 / total; lengths.len()]
        }
    })
}

/// Assembles the batch objective and its logit-space gradient
/// `sum_i w_i sum_t F_t A_i (e_{a_t} - pi(.|s_t))`.
pub fn aggregate_objective(
    policy: &TabularPolicy,
    sequences: &[BatchSequence],
    terms: &[Vec<TokenTerm>],
    mode: Aggregation,
) -> Result<(f64, Array2<f64>)> {
    if terms.len() != sequences.len() {
        return Err(LabError::input(format!(
            "{} term rows for {} sequences",
            terms.len(),
            sequences.len()
        )));
    }
    for (seq, row) in sequences.iter().zip(terms) {
        seq.validate(policy)?;
        if row.len() != seq.len() {
            return Err(LabError::input("term row length differs from its sequence"));
        }
    }
    let lengths: Vec<usize> = sequences.iter().map(BatchSequence::len).collect();
    let weights = aggregation_weights(&lengths, mode)?;
    let probs = probability_table(policy);
    let mut value = 0.0;
    let mut grad = Array2::zeros(policy.logits().dim());
    for ((seq, row), &w) in sequences.iter().zip(terms).zip(&weights) {
        for (t, term) in row.iter().enumerate() {
            value += w * term.value;
            let coef = w * term.grad_weight * seq.advantage;
            if coef == 0.0 {
                continue;
            }
            let s = seq.states[t];
            for a in 0..policy.num_actions() {
                grad[(s, a)] -= coef * probs[(s, a)];
            }
            grad[(s, seq.actions[t])] += coef;
        }
    }
    Ok((value, grad))
}

/// `dH/dz_a = -pi_a (ln pi_a + H)` for one row.
pub fn entropy_gradient_row(probs: &[f64]) -> Vec<f64> {
    let h = entropy_of(probs);
    probs
        .iter()
        .map(|&p| if p > 0.0 { -p * (p.ln() + h) } else { 0.0 })
        .collect()
}

/// `alpha` times the visitation-weighted mean entropy over `visited_states`
/// (one entry per token, repeats allowed), with its exact logit gradient.
pub fn entropy_bonus(policy: &TabularPolicy, visited_states: &[usize], alpha: f64) -> Result<(f64, Array2<f64>)> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(LabError::input(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    let mut grad = Array2::zeros(policy.logits().dim());
    if alpha == 0.0 || visited_states.is_empty() {
        return Ok((0.0, grad));
    }
    let mut counts = vec![0usize; policy.num_states()];
    for &s in visited_states {
        if s >= policy.num_states() {
            return Err(LabError::input(format!("visited state {s} out of range")));
        }
        counts[s] += 1;
    }
    let n = visited_states.len() as f64;
    let mut value = 0.0;
    for (s, &c) in counts.iter().enumerate().filter(|(_, &c)| c > 0) {
        let probs = policy.action_probabilities(s)?;
        let w = alpha * c as f64 / n;
        value += w * entropy_of(&probs);
        for (a, g) in entropy_gradient_row(&probs).into_iter().enumerate() {
            grad[(s, a)] += w * g;
        }
    }
    Ok((value, grad))
}

/// One evaluated token, kept for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub state: usize,
    pub action: usize,
    pub old_logprob: f64,
    pub new_logprob: f64,
    pub ratio: f64,
    pub advantage: f64,
    pub branch: Branch,
}

impl TokenRecord {
    pub fn old_prob(&self) -> f64 {
        self.old_logprob.exp()
    }
}

#[derive(Debug, Clone)]
pub struct SurrogateEval {
    pub value: f64,
    pub gradient: Array2<f64>,
    pub records: Vec<TokenRecord>,
}

/// Importance ratios of a sequence against the live policy.
pub fn live_ratios(probs: &Array2<f64>, seq: &BatchSequence) -> Vec<f64> {
    seq.states
        .iter()
        .zip(&seq.actions)
        .zip(&seq.old_logprobs)
        .map(|((&s, &a), &old)| (probs[(s, a)].ln() - old).exp())
        .collect()
}

/// Full objective (surrogate plus entropy bonus) and gradient at `policy`.
pub fn evaluate_surrogate(spec: &ObjectiveSpec, policy: &TabularPolicy, sequences: &[BatchSequence]) -> Result<SurrogateEval> {
    spec.validate()?;
    for seq in sequences {
        seq.validate(policy)?;
    }
    let probs = probability_table(policy);
    let mut terms = Vec::with_capacity(sequences.len());
    let mut records = Vec::with_capacity(sequences.iter().map(BatchSequence::len).sum());
    for seq in sequences {
        let ratios = live_ratios(&probs, seq);
        let row = sequence_terms(spec, &ratios, seq.advantage)?;
        for t in 0..seq.len() {
            let (s, a) = (seq.states[t], seq.actions[t]);
            records.push(TokenRecord {
                state: s,
                action: a,
                old_logprob: seq.old_logprobs[t],
                new_logprob: probs[(s, a)].ln(),
                ratio: ratios[t],
                advantage: seq.advantage,
                branch: row[t].branch,
            });
        }
        terms.push(row);
    }
    let (mut value, mut gradient) = aggregate_objective(policy, sequences, &terms, spec.aggregation)?;
    if spec.alpha > 0.0 {
        let visited: Vec<usize> = sequences.iter().flat_map(|s| s.states.iter().copied()).collect();
        let (bonus, bonus_grad) = entropy_bonus(policy, &visited, spec.alpha)?;
        value += bonus;
        gradient += &bonus_grad;
    }
    Ok(SurrogateEval {
        value,
        gradient,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn ppo_examples() {
        let t = ppo_token_term(1.0, 0.7, 0.2).unwrap();
        assert_eq!((t.value, t.grad_weight), (0.7, 1.0));

        let t = ppo_token_term(1.5, 1.0, 0.2).unwrap();
        assert_abs_diff_eq!(t.value, 1.2, epsilon = 1e-15);
        assert_eq!((t.grad_weight, t.branch), (0.0, Branch::RightClipped));

        let t = ppo_token_term(0.5, 1.0, 0.2).unwrap();
        assert_eq!((t.value, t.grad_weight, t.branch), (0.5, 0.5, Branch::InteriorOrPessimistic));

        assert!(ppo_token_term(0.0, 1.0, 0.2).is_err());
        assert!(ppo_token_term(-1.0, 1.0, 0.2).is_err());
    }

    #[test]
    fn ce_gppo_examples() {
        let t = ce_gppo_token_term(0.5, -2.0, 0.2, 0.5, 1.0).unwrap();
        assert_abs_diff_eq!(t.value, -0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(t.grad_weight, 0.4, epsilon = 1e-15);
        assert_eq!(t.branch, Branch::LeftClipped);

        let t = ce_gppo_token_term(1.5, 1.0, 0.2, 0.5, 1.0).unwrap();
        assert_abs_diff_eq!(t.value, 1.2, epsilon = 1e-15);
        assert_abs_diff_eq!(t.grad_weight, 1.2, epsilon = 1e-15);
        assert_eq!(t.branch, Branch::RightClipped);

        for (d, a) in [(0.3, -1.0), (1.9, 2.0)] {
            let t = ce_gppo_token_term(d, a, 0.2, 0.0, 0.0).unwrap();
            assert_eq!(t.grad_weight, 0.0);
            assert_eq!(t.grad_weight, ppo_token_term(d, a, 0.2).unwrap().grad_weight);
        }
        assert!(ce_gppo_token_term(0.0, 1.0, 0.2, 0.5, 1.0).is_err());
    }

    #[test]
    fn boundaries_fall_in_the_otherwise_branch() {
        for d in [0.8, 1.2] {
            for a in [-1.0, 1.0] {
                let t = ce_gppo_token_term(d, a, 0.2, 0.5, 1.0).unwrap();
                assert_eq!(t.branch, Branch::InteriorOrPessimistic);
                assert_eq!(t.grad_weight, d);
            }
        }
    }

    #[test]
    fn dapo_examples() {
        let t = dapo_token_term(1.25, 1.0, 0.2, 0.28).unwrap();
        assert_eq!((t.value, t.grad_weight), (1.25, 1.25));
        let t = dapo_token_term(1.35, 1.0, 0.2, 0.28).unwrap();
        assert_abs_diff_eq!(t.value, 1.28, epsilon = 1e-15);
        assert_eq!(t.grad_weight, 0.0);

        let mut rng = stream(1, "dapo", 0);
        for _ in 0..1000 {
            let d = rng.gen_range(0.01..3.0);
            let a = rng.gen_range(-3.0..3.0);
            let e = rng.gen_range(0.01..0.99);
            assert_eq!(dapo_token_term(d, a, e, e).unwrap(), ppo_token_term(d, a, e).unwrap());
        }
    }

    #[test]
    fn cispo_examples() {
        let t = cispo_token_term(0.5, 1.0, 0.2, 0.2).unwrap();
        assert_eq!(t.grad_weight, 0.8);
        assert_eq!(ce_gppo_token_term(0.5, 1.0, 0.2, 0.5, 1.0).unwrap().grad_weight, 0.5);

        let t = cispo_token_term(1.5, -1.0, 0.2, 0.2).unwrap();
        assert_eq!(t.grad_weight, 1.2);
        assert_eq!(ce_gppo_token_term(1.5, -1.0, 0.2, 0.5, 1.0).unwrap().grad_weight, 1.5);

        let t = cispo_token_term(1.1, -1.0, 0.2, 0.2).unwrap();
        assert_eq!(t.grad_weight, ppo_token_term(1.1, -1.0, 0.2).unwrap().grad_weight);
    }

    #[test]
    fn gspo_examples() {
        let terms = gspo_sequence_terms(&[1.0, 1.0, 1.0], 1.0, 3e-4, 4e-4).unwrap();
        assert!(terms.iter().all(|t| t.branch == Branch::InteriorOrPessimistic));
        assert_abs_diff_eq!(terms[0].grad_weight, 1.0 / 3.0, epsilon = 1e-15);

        let s = sequence_ratio(&[1.2, 1.2, 1.2]).unwrap();
        assert_abs_diff_eq!(s, 1.2, epsilon = 1e-14);
        let terms = gspo_sequence_terms(&[1.2, 1.2, 1.2], 1.0, 3e-4, 4e-4).unwrap();
        assert!(terms.iter().all(|t| t.branch == Branch::RightClipped && t.grad_weight == 0.0));

        assert!(gspo_sequence_terms(&[], 1.0, 3e-4, 4e-4).is_err());
    }

    #[test]
    fn gspo_clips_more_than_ppo_on_random_batch() {
        let mut rng = stream(2, "gspo-batch", 0);
        let (mut ppo_clipped, mut tokens, mut gspo_clipped, mut seqs) = (0, 0, 0, 0);
        for _ in 0..500 {
            let adv = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let ratios: Vec<f64> = (0..6).map(|_| (0.1 * (rng.gen::<f64>() * 2.0 - 1.0) * 1.7).exp()).collect();
            for &d in &ratios {
                tokens += 1;
                if ppo_token_term(d, adv, 0.2).unwrap().grad_weight == 0.0 {
                    ppo_clipped += 1;
                }
            }
            seqs += 1;
            if gspo_sequence_terms(&ratios, adv, 3e-4, 4e-4).unwrap()[0].grad_weight == 0.0 {
                gspo_clipped += 1;
            }
        }
        let ppo_frac = ppo_clipped as f64 / tokens as f64;
        let gspo_frac = gspo_clipped as f64 / seqs as f64;
        assert!(gspo_frac > ppo_frac, "gspo {gspo_frac} vs ppo {ppo_frac}");
    }

    #[test]
    fn aggregation_normalizers() {
        let policy = TabularPolicy::uniform(1, 2).unwrap();
        let seq = |n: usize| BatchSequence {
            states: vec![0; n],
            actions: vec![0; n],
            old_logprobs: vec![0.5f64.ln(); n],
            advantage: 0.0,
        };
        let seqs = vec![seq(2), seq(6)];
        let term = |v: f64| TokenTerm {
            value: v,
            grad_weight: 0.0,
            branch: Branch::InteriorOrPessimistic,
        };
        let ones = vec![vec![term(1.0); 2], vec![term(1.0); 6]];
        let short_only = vec![vec![term(1.0); 2], vec![term(0.0); 6]];
        for (terms, seq_mean, tok_mean) in [(&ones, 1.0, 1.0), (&short_only, 0.5, 0.25)] {
            let (v, g) = aggregate_objective(&policy, &seqs, terms, Aggregation::SequenceMean).unwrap();
            assert_abs_diff_eq!(v, seq_mean, epsilon = 1e-15);
            assert!(g.iter().all(|&x| x == 0.0));
            let (v, _) = aggregate_objective(&policy, &seqs, terms, Aggregation::TokenMean).unwrap();
            assert_abs_diff_eq!(v, tok_mean, epsilon = 1e-15);
        }
        assert!(aggregate_objective(&policy, &seqs, &ones[..1], Aggregation::TokenMean).is_err());
    }

    #[test]
    fn entropy_bonus_examples() {
        let uniform = TabularPolicy::uniform(2, 4).unwrap();
        let (v, g) = entropy_bonus(&uniform, &[0, 1], 0.0).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
        let (v, g) = entropy_bonus(&uniform, &[0, 0, 1], 0.003).unwrap();
        assert_abs_diff_eq!(v, 0.003 * 4f64.ln(), epsilon = 1e-15);
        assert!(g.iter().all(|&x| x.abs() < 1e-15));
    }

    #[test]
    fn entropy_gradient_matches_central_differences() {
        let mut rng = stream(8, "hgrad", 0);
        for _ in 0..50 {
            let n = rng.gen_range(2..9);
            let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let h_at = |z: &[f64]| entropy_of(&softmax(ndarray::ArrayView1::from(z)));
            let analytic = entropy_gradient_row(&softmax(ndarray::ArrayView1::from(&z[..])));
            for a in 0..n {
                let (mut up, mut dn) = (z.clone(), z.clone());
                up[a] += 1e-6;
                dn[a] -= 1e-6;
                let numeric = (h_at(&up) - h_at(&dn)) / 2e-6;
                assert_abs_diff_eq!(analytic[a], numeric, epsilon = 1e-8);
            }
        }
    }

    /// Stop-gradient forward of one token as a function of the live
    /// `ln delta`, with every frozen factor pinned at `frozen`.
    fn stopgrad_value(spec: &ObjectiveSpec, log_delta: f64, frozen: f64, adv: f64) -> f64 {
        let delta = log_delta.exp();
        let (lo, hi) = spec.clip_bounds();
        match spec.algorithm {
            Algorithm::CeGppo if frozen < lo && adv < 0.0 => spec.beta1 * lo / frozen * delta * adv,
            Algorithm::CeGppo if frozen > hi && adv > 0.0 => spec.beta2 * hi / frozen * delta * adv,
            Algorithm::CeGppo => delta * adv,
            Algorithm::Cispo => frozen.clamp(lo, hi) / frozen * delta * adv,
            _ => (delta * adv).min(delta.clamp(lo, hi) * adv),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100_000))]
        #[test]
        fn prop_ce_gppo_with_zero_betas_matches_ppo_gradient(delta in 1e-3f64..5.0, adv in -5.0f64..5.0) {
            let ce = ce_gppo_token_term(delta, adv, 0.2, 0.0, 0.0).unwrap();
            let ppo = ppo_token_term(delta, adv, 0.2).unwrap();
            prop_assert_eq!(ce.grad_weight, ppo.grad_weight);
            prop_assert_eq!(ce.branch, ppo.branch);
        }
    }

    proptest! {
        #[test]
        fn prop_ce_gppo_clipped_weights_are_exact_and_bounded(
            delta in 1e-4f64..1e4, adv in -5.0f64..5.0, b1 in 0.0f64..2.0, b2 in 0.0f64..2.0,
        ) {
            let t = ce_gppo_token_term(delta, adv, 0.2, b1, b2).unwrap();
            match t.branch {
                Branch::LeftClipped => prop_assert_eq!(t.grad_weight, b1 * 0.8),
                Branch::RightClipped => prop_assert_eq!(t.grad_weight, b2 * 1.2),
                Branch::InteriorOrPessimistic => prop_assert_eq!(t.grad_weight, delta),
            }
            prop_assert!(t.grad_weight <= (b1 * 0.8).max(b2 * 1.2).max(delta));
        }

        #[test]
        fn prop_exactly_one_branch_fires(delta in 1e-3f64..5.0, adv in -5.0f64..5.0) {
            let t = ce_gppo_token_term(delta, adv, 0.2, 0.5, 1.0).unwrap();
            let left = delta < 0.8 && adv < 0.0;
            let right = delta > 1.2 && adv > 0.0;
            prop_assert!(!(left && right));
            let expected = if left { Branch::LeftClipped } else if right { Branch::RightClipped } else { Branch::InteriorOrPessimistic };
            prop_assert_eq!(t.branch, expected);
        }

        #[test]
        fn prop_clipped_weight_linear_in_beta(delta in 1e-3f64..0.79, b in 0.0f64..3.0, k in 0.0f64..3.0) {
            let w = |beta: f64| ce_gppo_token_term(delta, -1.0, 0.2, beta, 1.0).unwrap().grad_weight;
            prop_assert!((w(b * k) - k * w(b)).abs() < 1e-12);
            prop_assert!(w(b + 0.1) > w(b));
            let r = |beta: f64| ce_gppo_token_term(1.0 / delta, 1.0, 0.2, 0.5, beta).unwrap().grad_weight;
            prop_assert!(r(b + 0.1) > r(b));
        }

        #[test]
        fn prop_forward_backward_consistency(
            algo in prop::sample::select(vec![Algorithm::Ppo, Algorithm::Dapo, Algorithm::Cispo, Algorithm::CeGppo]),
            log_delta in -2.0f64..2.0,
            adv in -3.0f64..3.0,
        ) {
            let spec = ObjectiveSpec::for_algorithm(algo);
            let delta = log_delta.exp();
            let (lo, hi) = spec.clip_bounds();
            let h = 1e-6;
            // Stay clear of the kinks so central differences see one branch.
            prop_assume!((delta - lo).abs() > 10.0 * h * delta + 1e-9 && (delta - hi).abs() > 10.0 * h * delta + 1e-9);
            let term = sequence_terms(&spec, &[delta], adv).unwrap()[0];
            prop_assert!((term.value - stopgrad_value(&spec, log_delta, delta, adv)).abs() < 1e-12);
            let numeric = (stopgrad_value(&spec, log_delta + h, delta, adv) - stopgrad_value(&spec, log_delta - h, delta, adv)) / (2.0 * h);
            prop_assert!((numeric - term.grad_weight * adv).abs() < 1e-7, "numeric {} analytic {}", numeric, term.grad_weight * adv);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(ObjectiveSpec::ce_gppo(0.5, 1.0).validate().is_ok());
        assert!(ObjectiveSpec { eps: 1.0, ..ObjectiveSpec::ppo() }.validate().is_err());
        assert!(ObjectiveSpec { eps_low: 0.0, ..ObjectiveSpec::dapo() }.validate().is_err());
        assert!(ObjectiveSpec { eps_high: 0.0, ..ObjectiveSpec::dapo() }.validate().is_err());
        assert!(ObjectiveSpec::ce_gppo(-0.1, 1.0).validate().is_err());
        assert!(ObjectiveSpec::ce_gppo(0.5, f64::INFINITY).validate().is_err());
        assert!(ObjectiveSpec::grpo().with_alpha(-1.0).validate().is_err());
        assert_eq!("ce_gppo".parse::<Algorithm>().unwrap(), Algorithm::CeGppo);
        assert!("trpo".parse::<Algorithm>().is_err());
    }
}
