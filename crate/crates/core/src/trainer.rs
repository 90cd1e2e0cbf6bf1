//! The seeded RL loop: rollout, group advantages, mini-epoch clipped updates,
//! per-step metrics and checkpointing.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::advantage::{dynamic_sampling_filter, group_advantages, AdvantageOutcome, DegeneratePolicy};
use crate::entropy::{ProbThreshold, QuadrantAccumulator};
use crate::env::{rollout_group_from_snapshot, sample_trajectory, write_rollout_log, EnvConfig, RolloutGroup};
use crate::error::{LabError, Result};
use crate::objectives::{evaluate_surrogate, BatchSequence, ObjectiveSpec};
use crate::policy::{exact_kl, Checkpoint, TabularPolicy};
use crate::rng::stream;

pub const CONFIG_SCHEMA: &str = "cegppo-run/1";
pub const MANIFEST_SCHEMA: &str = "cegppo-manifest/1";

/// Fixed metrics column order.
pub const CSV_COLUMNS: [&str; 14] = [
    "step",
    "entropy_exact",
    "entropy_sampled",
    "kl",
    "grad_norm",
    "mean_reward",
    "accuracy",
    "clip_left",
    "clip_right",
    "frac_pahp",
    "frac_nalp",
    "frac_palp",
    "frac_nahp",
    "filtered_groups",
];

/// From `step` on, CE-GPPO uses `(beta1, beta2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaSwitch {
    pub step: usize,
    pub beta1: f64,
    pub beta2: f64,
}

fn schema_default() -> String {
    CONFIG_SCHEMA.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(default = "schema_default")]
    pub schema: String,
    pub env: EnvConfig,
    pub group_size: usize,
    pub prompts_per_batch: usize,
    pub mini_epochs: usize,
    pub minibatch_fraction: f64,
    pub learning_rate: f64,
    pub total_steps: usize,
    pub objective: ObjectiveSpec,
    pub dynamic_sampling: bool,
    /// Handling of all-equal groups; defaults to filter with dynamic
    /// sampling and zero without.
    pub degenerate: Option<DegeneratePolicy>,
    /// Extra rollout rounds when every group of a step is filtered.
    pub max_resample_attempts: usize,
    pub seed: u64,
    pub beta_schedule: Vec<BetaSwitch>,
    /// Per-step KL(snapshot || current) above this is logged as a breach.
    pub kl_ceiling: f64,
    pub eval_samples_per_prompt: usize,
    /// Split between high- and low-probability tokens for the quadrant fractions.
    pub prob_threshold: ProbThreshold,
    /// Rollout worker threads; 0 uses every core. Never changes results.
    pub threads: usize,
    pub output_dir: Option<PathBuf>,
    /// Also write every rollout to `rollouts.jsonl` in `output_dir`.
    pub log_rollouts: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema: schema_default(),
            env: EnvConfig::default(),
            group_size: 8,
            prompts_per_batch: 64,
            mini_epochs: 12,
            minibatch_fraction: 0.25,
            learning_rate: DEFAULT_LEARNING_RATE,
            total_steps: 500,
            objective: ObjectiveSpec::ce_gppo(0.5, 1.0),
            dynamic_sampling: false,
            degenerate: None,
            max_resample_attempts: 8,
            seed: 0,
            beta_schedule: Vec::new(),
            kl_ceiling: DEFAULT_KL_CEILING,
            eval_samples_per_prompt: 32,
            prob_threshold: ProbThreshold::Uniform,
            threads: 0,
            output_dir: None,
            log_rollouts: false,
        }
    }
}

pub const DEFAULT_LEARNING_RATE: f64 = 6.0;
pub const DEFAULT_KL_CEILING: f64 = 0.1;

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return Err(LabError::config(format!(
                "unsupported config schema {:?}, expected {CONFIG_SCHEMA:?}",
                self.schema
            )));
        }
        self.env.validate()?;
        self.objective.validate()?;
        if self.group_size < 2 {
            return Err(LabError::config("group_size must be >= 2"));
        }
        if self.prompts_per_batch < 1 {
            return Err(LabError::config("prompts_per_batch must be >= 1"));
        }
        if self.mini_epochs < 1 {
            return Err(LabError::config("mini_epochs must be >= 1"));
        }
        if !(self.minibatch_fraction > 0.0 && self.minibatch_fraction <= 1.0) {
            return Err(LabError::config(format!(
                "minibatch_fraction must lie in (0, 1], got {}",
                self.minibatch_fraction
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(LabError::config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.total_steps < 1 {
            return Err(LabError::config("total_steps must be >= 1"));
        }
        if !(self.kl_ceiling > 0.0) {
            return Err(LabError::config("kl_ceiling must be > 0"));
        }
        if self.eval_samples_per_prompt < 1 {
            return Err(LabError::config("eval_samples_per_prompt must be >= 1"));
        }
        if let ProbThreshold::Fixed(t) = self.prob_threshold {
            if !(t > 0.0 && t <= 1.0) {
                return Err(LabError::config(format!("prob_threshold must lie in (0, 1], got {t}")));
            }
        }
        for w in self.beta_schedule.windows(2) {
            if w[1].step <= w[0].step {
                return Err(LabError::config("beta_schedule steps must be strictly increasing"));
            }
        }
        for sw in &self.beta_schedule {
            ObjectiveSpec::ce_gppo(sw.beta1, sw.beta2).validate()?;
        }
        if !self.beta_schedule.is_empty() && self.objective.algorithm != crate::objectives::Algorithm::CeGppo {
            return Err(LabError::config("beta_schedule only applies to ce_gppo"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| LabError::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }

    pub fn degenerate_policy(&self) -> DegeneratePolicy {
        self.degenerate.unwrap_or(if self.dynamic_sampling {
            DegeneratePolicy::Filter
        } else {
            DegeneratePolicy::Zero
        })
    }

    /// The objective in force at `step`.
    pub fn objective_at(&self, step: usize) -> ObjectiveSpec {
        match self.beta_schedule.iter().rev().find(|sw| sw.step <= step) {
            Some(sw) => ObjectiveSpec {
                beta1: sw.beta1,
                beta2: sw.beta2,
                ..self.objective
            },
            None => self.objective,
        }
    }
}

/// Training and held-out targets. With `M > 2` the upper half of the
/// residues is held out; otherwise evaluation reuses the training targets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSplit {
    pub train: Vec<usize>,
    pub held_out: Vec<usize>,
    /// True when `held_out` repeats the training targets.
    pub reused: bool,
}

pub fn target_split(modulus: usize) -> TargetSplit {
    if modulus > 2 {
        let cut = modulus.div_ceil(2);
        TargetSplit {
            train: (0..cut).collect(),
            held_out: (cut..modulus).collect(),
            reused: false,
        }
    } else {
        let all: Vec<usize> = (0..modulus).collect();
        TargetSplit {
            train: all.clone(),
            held_out: all,
            reused: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// avg@k over prompts.
    pub accuracy: f64,
    pub per_prompt: Vec<(usize, f64)>,
    pub samples_per_prompt: usize,
    pub reused_training_targets: bool,
}

/// Sampled success rate: `samples_per_prompt` responses to each target.
pub fn evaluate<R: Rng + ?Sized>(
    policy: &TabularPolicy,
    env: &EnvConfig,
    targets: &[usize],
    samples_per_prompt: usize,
    rng: &mut R,
) -> Result<EvalReport> {
    if targets.is_empty() || samples_per_prompt == 0 {
        return Err(LabError::input("evaluation needs at least one target and one sample"));
    }
    let mut per_prompt = Vec::with_capacity(targets.len());
    for &target in targets {
        let task = env.task(target)?;
        let mut hits = 0.0;
        for _ in 0..samples_per_prompt {
            hits += sample_trajectory(policy, &task, rng)?.reward;
        }
        per_prompt.push((target, hits / samples_per_prompt as f64));
    }
    let accuracy = per_prompt.iter().map(|p| p.1).sum::<f64>() / targets.len() as f64;
    Ok(EvalReport {
        accuracy,
        per_prompt,
        samples_per_prompt,
        reused_training_targets: false,
    })
}

/// Exact probability that `policy` solves `target`, by forward propagation
/// of the running-sum residue distribution.
pub fn success_probability(policy: &TabularPolicy, env: &EnvConfig, target: usize) -> Result<f64> {
    env.task(target)?;
    if policy.shape() != (env.num_states(), env.vocab_size) {
        return Err(LabError::input("policy shape does not fit the task"));
    }
    let m = env.modulus;
    let mut dist = vec![0.0; m];
    dist[0] = 1.0;
    for pos in 0..env.seq_len {
        let mut next = vec![0.0; m];
        for (res, &mass) in dist.iter().enumerate().filter(|(_, &p)| p > 0.0) {
            let probs = policy.action_probabilities(env.state_id(pos, res))?;
            for (a, p) in probs.into_iter().enumerate() {
                next[(res + a) % m] += mass * p;
            }
        }
        dist = next;
    }
    Ok(dist[target])
}

/// Metrics for one step. Rollout-side quantities (entropies, reward,
/// accuracy) describe the policy entering the step; update-side quantities
/// (KL, gradient norm, clip and quadrant fractions) describe the step's
/// mini-epoch passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    /// Token-visitation-weighted exact entropy of the rollout policy.
    pub entropy_exact: f64,
    /// `-mean ln pi_old(y_t)` over rollout tokens.
    pub entropy_sampled: f64,
    /// Token-visitation-weighted KL(snapshot || updated policy).
    pub kl: f64,
    /// Mean Frobenius norm of the minibatch gradients.
    pub grad_norm: f64,
    pub mean_reward: f64,
    /// Held-out avg@k.
    pub accuracy: f64,
    pub clip_left: f64,
    pub clip_right: f64,
    pub frac_pahp: f64,
    pub frac_nalp: f64,
    pub frac_palp: f64,
    pub frac_nahp: f64,
    pub filtered_groups: usize,
    /// Mean rollout-time probability of clipped tokens (NaN if none).
    pub mean_prob_clipped: f64,
    pub mean_prob_unclipped: f64,
    /// Fraction of evaluated tokens with ratio != 1, per pass.
    pub off_policy_fraction: Vec<f64>,
}

impl StepMetrics {
    /// Values in [`CSV_COLUMNS`] order, excluding `step` and `filtered_groups`.
    fn csv_reals(&self) -> [f64; 12] {
        [
            self.entropy_exact,
            self.entropy_sampled,
            self.kl,
            self.grad_norm,
            self.mean_reward,
            self.accuracy,
            self.clip_left,
            self.clip_right,
            self.frac_pahp,
            self.frac_nalp,
            self.frac_palp,
            self.frac_nahp,
        ]
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        CSV_COLUMNS[1..13]
            .iter()
            .zip(self.csv_reals())
            .find(|(_, v)| !v.is_finite())
            .map(|(name, _)| *name)
    }
}

pub fn write_metrics_csv(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_COLUMNS)?;
    for m in metrics {
        let mut row = vec![m.step.to_string()];
        row.extend(m.csv_reals().iter().map(|v| format!("{v:.17e}")));
        row.push(m.filtered_groups.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub steps_completed: usize,
    pub target_split: TargetSplit,
    pub kl_ceiling_breaches: usize,
    /// `None` for a completed run.
    pub halted: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metrics: Vec<StepMetrics>,
    pub policy: TabularPolicy,
    pub split: TargetSplit,
}

impl RunOutcome {
    pub fn kl_breaches(&self, ceiling: f64) -> usize {
        self.metrics.iter().filter(|m| !(m.kl < ceiling)).count()
    }
}

fn rollout_index(config: &RunConfig, step: usize, attempt: usize, group: usize) -> u64 {
    (((step * (config.max_resample_attempts + 1) + attempt) * config.prompts_per_batch) + group) as u64
}

fn rollout_round(
    config: &RunConfig,
    snapshot: &crate::policy::PolicySnapshot,
    split: &TargetSplit,
    step: usize,
    attempt: usize,
) -> Result<Vec<RolloutGroup>> {
    (0..config.prompts_per_batch)
        .into_par_iter()
        .map(|g| {
            let mut rng = stream(config.seed, "rollout", rollout_index(config, step, attempt, g));
            let target = split.train[rng.gen_range(0..split.train.len())];
            let task = config.env.task(target)?;
            rollout_group_from_snapshot(snapshot, &task, config.group_size, &mut rng)
        })
        .collect()
}

struct StepOutput {
    metrics: StepMetrics,
    groups: Vec<RolloutGroup>,
}

fn run_step(config: &RunConfig, policy: &mut TabularPolicy, split: &TargetSplit, step: usize) -> Result<StepOutput> {
    let snapshot = policy.snapshot();
    let spec = config.objective_at(step);

    let mut filtered_groups = 0;
    let mut attempt = 0;
    let groups = loop {
        let round = rollout_round(config, &snapshot, split, step, attempt)?;
        if !config.dynamic_sampling {
            break round;
        }
        let n = round.len();
        match dynamic_sampling_filter(round) {
            Ok(kept) => {
                filtered_groups += n - kept.len();
                break kept;
            }
            Err(LabError::EmptyBatch { .. }) => {
                filtered_groups += n;
                attempt += 1;
                if attempt > config.max_resample_attempts {
                    return Err(LabError::EmptyBatch { step, attempts: attempt });
                }
                debug!("step {step}: every group filtered, resampling (attempt {attempt})");
            }
            Err(e) => return Err(e),
        }
    };

    // Rollout-side metrics on the snapshot.
    let mut sequences = Vec::new();
    let mut visited = Vec::new();
    let mut reward_sum = 0.0;
    let mut trajectories = 0;
    let mut sampled_entropy = 0.0;
    for group in &groups {
        for t in &group.trajectories {
            reward_sum += t.reward;
            trajectories += 1;
            visited.extend_from_slice(&t.states);
            sampled_entropy -= t.old_logprobs.iter().sum::<f64>();
        }
        match group_advantages(group, config.degenerate_policy())? {
            AdvantageOutcome::Kept(adv) => {
                for (t, &a) in group.trajectories.iter().zip(&adv.values) {
                    sequences.push(BatchSequence::from_trajectory(t, a));
                }
            }
            AdvantageOutcome::Filtered { .. } => filtered_groups += 1,
        }
    }
    let tokens = visited.len() as f64;
    let mut counts = vec![0usize; policy.num_states()];
    for &s in &visited {
        counts[s] += 1;
    }
    let mut entropy_exact = 0.0;
    for (s, &c) in counts.iter().enumerate().filter(|(_, &c)| c > 0) {
        entropy_exact += c as f64 * snapshot.exact_entropy(s)?;
    }
    entropy_exact /= tokens;

    let mut eval_rng = stream(config.seed, "eval", step as u64);
    let eval = evaluate(&snapshot, &config.env, &split.held_out, config.eval_samples_per_prompt, &mut eval_rng)?;

    // Mini-epoch passes with ratios against the live policy.
    let (lo, hi) = spec.clip_bounds();
    let threshold = config.prob_threshold.value(config.env.vocab_size);
    let mut quadrants = QuadrantAccumulator::default();
    let mut grad_norm_sum = 0.0;
    let mut updates = 0;
    let mut off_policy_fraction = Vec::with_capacity(config.mini_epochs);
    if !sequences.is_empty() {
        let chunk = ((config.minibatch_fraction * sequences.len() as f64).ceil() as usize).max(1);
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        for pass in 0..config.mini_epochs {
            let mut rng = stream(config.seed, "minibatch", (step * config.mini_epochs + pass) as u64);
            order.shuffle(&mut rng);
            let mut moved = 0usize;
            let mut seen = 0usize;
            for idx in order.chunks(chunk) {
                let batch: Vec<BatchSequence> = idx.iter().map(|&i| sequences[i].clone()).collect();
                // The batch is well formed by construction, so a rejection
                // here means the live policy has degenerated numerically.
                let eval = evaluate_surrogate(&spec, policy, &batch).map_err(|e| match e {
                    LabError::Input(reason) => LabError::StabilityAlarm { step, reason },
                    other => other,
                })?;
                for r in &eval.records {
                    quadrants.add(r, 1.0 - lo, hi - 1.0, threshold)?;
                    moved += usize::from(r.ratio != 1.0);
                    seen += 1;
                }
                let norm = eval.gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
                if !norm.is_finite() {
                    return Err(LabError::StabilityAlarm {
                        step,
                        reason: "non-finite gradient".into(),
                    });
                }
                grad_norm_sum += norm;
                updates += 1;
                if norm > 0.0 {
                    policy.apply_gradient(&eval.gradient, config.learning_rate)?;
                }
            }
            off_policy_fraction.push(moved as f64 / seen.max(1) as f64);
        }
    }

    let mut kl = 0.0;
    for (s, &c) in counts.iter().enumerate().filter(|(_, &c)| c > 0) {
        kl += c as f64 * exact_kl(&snapshot, policy, s)?.value();
    }
    kl /= tokens;

    let q = quadrants.finish();
    let metrics = StepMetrics {
        step,
        entropy_exact,
        entropy_sampled: sampled_entropy / tokens,
        kl,
        grad_norm: if updates > 0 { grad_norm_sum / updates as f64 } else { 0.0 },
        mean_reward: reward_sum / trajectories as f64,
        accuracy: eval.accuracy,
        clip_left: q.left_clip_fraction,
        clip_right: q.right_clip_fraction,
        frac_pahp: q.frac_pa_hp,
        frac_nalp: q.frac_na_lp,
        frac_palp: q.frac_pa_lp,
        frac_nahp: q.frac_na_hp,
        filtered_groups,
        mean_prob_clipped: q.mean_prob_clipped,
        mean_prob_unclipped: q.mean_prob_unclipped,
        off_policy_fraction,
    };
    Ok(StepOutput { metrics, groups })
}

struct Outputs {
    dir: PathBuf,
    rollouts: Option<BufWriter<File>>,
}

impl Outputs {
    fn open(config: &RunConfig) -> Result<Option<Self>> {
        let Some(dir) = &config.output_dir else {
            return Ok(None);
        };
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), config.to_json()?)?;
        let rollouts = if config.log_rollouts {
            Some(BufWriter::new(File::create(dir.join("rollouts.jsonl"))?))
        } else {
            None
        };
        Ok(Some(Self { dir: dir.clone(), rollouts }))
    }

    fn finish(
        &self,
        config: &RunConfig,
        split: &TargetSplit,
        metrics: &[StepMetrics],
        policy: &TabularPolicy,
        halted: Option<String>,
    ) -> Result<()> {
        write_metrics_csv(&self.dir.join("metrics.csv"), metrics)?;
        Checkpoint::from_policy(policy, vec![config.seed], metrics.len()).save(&self.dir.join("checkpoint.json"))?;
        let manifest = RunManifest {
            schema: MANIFEST_SCHEMA.to_string(),
            config_hash: config.hash()?,
            seed: config.seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            steps_completed: metrics.len(),
            target_split: split.clone(),
            kl_ceiling_breaches: metrics.iter().filter(|m| !(m.kl < config.kl_ceiling)).count(),
            halted,
        };
        fs::write(self.dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

/// Runs `config.total_steps` steps from the uniform policy.
///
/// On a stability alarm or an empty-batch abort the last good policy and
/// the metrics so far are written (when `output_dir` is set) before the
/// error is returned.
pub fn train(config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| LabError::config(format!("cannot start rollout workers: {e}")))?;
    pool.install(|| train_inner(config))
}

fn train_inner(config: &RunConfig) -> Result<RunOutcome> {
    let split = target_split(config.env.modulus);
    let mut outputs = Outputs::open(config)?;
    let mut policy = config.env.new_policy()?;
    let mut metrics: Vec<StepMetrics> = Vec::with_capacity(config.total_steps);
    info!(
        "training {} for {} steps, seed {}",
        config.objective.algorithm.name(),
        config.total_steps,
        config.seed
    );
    for step in 0..config.total_steps {
        let last_good = policy.clone();
        let result = run_step(config, &mut policy, &split, step).and_then(|out| {
            if let Some(field) = out.metrics.first_non_finite() {
                return Err(LabError::StabilityAlarm {
                    step,
                    reason: format!("non-finite {field}"),
                });
            }
            Ok(out)
        });
        let out = match result {
            Ok(out) => out,
            Err(err) => {
                let err = match err {
                    LabError::NonFinite { what, index } => LabError::StabilityAlarm {
                        step,
                        reason: format!("non-finite {what} at index {index}"),
                    },
                    other => other,
                };
                warn!("halting at step {step}: {err}");
                if let Some(o) = &outputs {
                    o.finish(config, &split, &metrics, &last_good, Some(err.to_string()))?;
                }
                return Err(err);
            }
        };
        if !(out.metrics.kl < config.kl_ceiling) {
            debug!("step {step}: KL {} above ceiling {}", out.metrics.kl, config.kl_ceiling);
        }
        if let Some(w) = outputs.as_mut().and_then(|o| o.rollouts.as_mut()) {
            write_rollout_log(w, step, &out.groups)?;
        }
        metrics.push(out.metrics);
    }
    if let Some(o) = &mut outputs {
        if let Some(w) = o.rollouts.as_mut() {
            use std::io::Write;
            w.flush()?;
        }
        o.finish(config, &split, &metrics, &policy, None)?;
    }
    Ok(RunOutcome { metrics, policy, split })
}

/// Gradient of one minibatch update, exposed for offline scoring of
/// trained-run updates with the entropy predictor.
pub fn minibatch_gradient(spec: &ObjectiveSpec, policy: &TabularPolicy, batch: &[BatchSequence]) -> Result<Array2<f64>> {
    Ok(evaluate_surrogate(spec, policy, batch)?.gradient)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::Algorithm;
    use approx::assert_abs_diff_eq;

    fn small(objective: ObjectiveSpec) -> RunConfig {
        RunConfig {
            total_steps: 6,
            prompts_per_batch: 4,
            objective,
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_round_trip_and_unknown_keys() {
        let c = RunConfig::default();
        let back = RunConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        let err = RunConfig::from_json(r#"{"learning_rate": 0.1, "lr": 0.1}"#).unwrap_err();
        assert!(matches!(err, LabError::Config(_)));
        let partial = RunConfig::from_json(r#"{"seed": 7}"#).unwrap();
        assert_eq!(partial.seed, 7);
        assert!(RunConfig::from_json(r#"{"schema": "cegppo-run/0"}"#).is_err());
    }

    #[test]
    fn config_invariants() {
        let bad = [
            RunConfig { mini_epochs: 0, ..RunConfig::default() },
            RunConfig { learning_rate: 0.0, ..RunConfig::default() },
            RunConfig { total_steps: 0, ..RunConfig::default() },
            RunConfig {
                beta_schedule: vec![
                    BetaSwitch { step: 5, beta1: 0.0, beta2: 1.0 },
                    BetaSwitch { step: 5, beta1: 0.5, beta2: 1.0 },
                ],
                ..RunConfig::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(LabError::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn schedule_lookup() {
        let c = RunConfig {
            objective: ObjectiveSpec::ce_gppo(0.0, 1.0),
            beta_schedule: vec![BetaSwitch { step: 10, beta1: 0.5, beta2: 1.0 }],
            ..RunConfig::default()
        };
        assert_eq!(c.objective_at(9).beta1, 0.0);
        assert_eq!(c.objective_at(10).beta1, 0.5);
        assert_eq!(c.objective_at(400).beta1, 0.5);
    }

    #[test]
    fn split_is_disjoint_when_possible() {
        let s = target_split(5);
        assert_eq!((s.train.clone(), s.held_out.clone(), s.reused), (vec![0, 1, 2], vec![3, 4], false));
        assert!(target_split(2).reused);
    }

    #[test]
    fn uniform_success_probability() {
        let env = EnvConfig::default();
        let p = env.new_policy().unwrap();
        for t in 0..5 {
            let exact = success_probability(&p, &env, t).unwrap();
            // 8^6 = 262144 sequences; residue classes of 0..7 mod 5 have sizes 2,2,2,1,1.
            assert_abs_diff_eq!(exact, 0.2, epsilon = 1e-3);
        }
    }

    #[test]
    fn optimal_policy_scores_one() {
        let env = EnvConfig::default();
        let mut logits = Array2::zeros((env.num_states(), env.vocab_size));
        let target = 3;
        for res in 0..env.modulus {
            // The last token closes the gap to the target.
            let a = (target + env.modulus - res) % env.modulus;
            logits[(env.state_id(env.seq_len - 1, res), a)] = 60.0;
        }
        let p = TabularPolicy::from_logits(logits).unwrap();
        let r = evaluate(&p, &env, &[target], 64, &mut stream(0, "e", 0)).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_abs_diff_eq!(success_probability(&p, &env, target).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn single_pass_is_on_policy_for_every_clipped_objective() {
        let mut finals = Vec::new();
        for spec in [ObjectiveSpec::ppo(), ObjectiveSpec::grpo(), ObjectiveSpec::ce_gppo(0.5, 1.0)] {
            let c = RunConfig {
                mini_epochs: 1,
                minibatch_fraction: 1.0,
                objective: ObjectiveSpec {
                    aggregation: crate::objectives::Aggregation::TokenMean,
                    ..spec
                },
                ..small(spec)
            };
            let out = train(&c).unwrap();
            for m in &out.metrics {
                assert_eq!(m.clip_left + m.clip_right, 0.0);
                assert_eq!(m.off_policy_fraction, vec![0.0]);
            }
            finals.push(out.policy.logits().clone());
        }
        assert_eq!(finals[0], finals[1]);
        assert_eq!(finals[0], finals[2]);
    }

    #[test]
    fn later_passes_go_off_policy() {
        let out = train(&small(ObjectiveSpec::ce_gppo(0.5, 1.0))).unwrap();
        for m in &out.metrics {
            if m.grad_norm > 0.0 {
                assert!(m.off_policy_fraction[1..].iter().all(|&f| f > 0.0), "{m:?}");
            }
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let base = small(ObjectiveSpec::for_algorithm(Algorithm::Dapo));
        let a = train(&RunConfig { threads: 1, ..base.clone() }).unwrap();
        let b = train(&RunConfig { threads: 4, ..base }).unwrap();
        assert_eq!(format!("{:?}", a.metrics), format!("{:?}", b.metrics));
        assert_eq!(a.policy.logits(), b.policy.logits());
    }

    #[test]
    fn dynamic_sampling_abort_reports_empty_batch() {
        // A pair of one-token answers agrees half the time, so over 50 steps
        // a batch of one such group is all but certain to be filtered.
        let c = RunConfig {
            env: EnvConfig { vocab_size: 2, seq_len: 1, modulus: 2 },
            group_size: 2,
            prompts_per_batch: 1,
            dynamic_sampling: true,
            max_resample_attempts: 0,
            total_steps: 50,
            ..RunConfig::default()
        };
        match train(&c) {
            Err(LabError::EmptyBatch { attempts, .. }) => assert_eq!(attempts, 1),
            other => panic!("expected an empty-batch abort, got {:?}", other.map(|o| o.metrics.len())),
        }
    }
}
