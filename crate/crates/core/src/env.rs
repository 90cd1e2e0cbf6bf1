//! ModSum: a verifiable-reward sequence task, plus group rollouts.
//!
//! A task asks for `seq_len` tokens from a vocabulary of `vocab_size` ids
//! whose sum is congruent to `target` modulo `modulus`. The reward is the
//! terminal 0/1 verdict of that predicate.
//!
//! States are `(position, residue of the running sum)` pairs with ids
//! `position * modulus + residue`, plus a terminal state last. The target is
//! not part of the state: like a prompt the policy never gets to read, it
//! only shows up through the reward, so one table serves every target and
//! the best a policy can do on a mix of targets is to spread its final
//! residue over them.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::policy::{PolicySnapshot, TabularPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub modulus: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            vocab_size: 8,
            seq_len: 6,
            modulus: 5,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(LabError::config(format!("vocab_size must be >= 2, got {}", self.vocab_size)));
        }
        if self.seq_len < 1 {
            return Err(LabError::config("seq_len must be >= 1"));
        }
        if self.modulus < 2 {
            return Err(LabError::config(format!(
                "modulus must be >= 2 (reward is constant otherwise), got {}",
                self.modulus
            )));
        }
        Ok(())
    }

    pub fn num_states(&self) -> usize {
        self.seq_len * self.modulus + 1
    }

    pub fn terminal_state(&self) -> usize {
        self.seq_len * self.modulus
    }

    pub fn state_id(&self, position: usize, residue: usize) -> usize {
        debug_assert!(position < self.seq_len && residue < self.modulus);
        position * self.modulus + residue
    }

    /// Inverse of [`EnvConfig::state_id`]; `None` for the terminal state.
    pub fn decode_state(&self, state: usize) -> Option<(usize, usize)> {
        (state < self.terminal_state()).then(|| (state / self.modulus, state % self.modulus))
    }

    /// State reached by taking `action` in `state`.
    pub fn transition(&self, state: usize, action: usize) -> usize {
        match self.decode_state(state) {
            None => state,
            Some((position, residue)) => {
                let next = (residue + action) % self.modulus;
                if position + 1 == self.seq_len {
                    self.terminal_state()
                } else {
                    self.state_id(position + 1, next)
                }
            }
        }
    }

    pub fn task(&self, target: usize) -> Result<ModSumTask> {
        self.validate()?;
        if target >= self.modulus {
            return Err(LabError::input(format!("target {target} not below modulus {}", self.modulus)));
        }
        Ok(ModSumTask { env: *self, target })
    }

    pub fn new_policy(&self) -> Result<TabularPolicy> {
        self.validate()?;
        TabularPolicy::uniform(self.num_states(), self.vocab_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModSumTask {
    pub env: EnvConfig,
    pub target: usize,
}

impl ModSumTask {
    pub fn start_state(&self) -> usize {
        self.env.state_id(0, 0)
    }

    /// The reward predicate on a complete action sequence.
    pub fn is_solved(&self, actions: &[usize]) -> bool {
        actions.iter().sum::<usize>() % self.env.modulus == self.target
    }
}

/// Draws a task with a target uniform over `[0, modulus)`.
pub fn sample_task<R: Rng + ?Sized>(env: &EnvConfig, rng: &mut R) -> Result<ModSumTask> {
    env.validate()?;
    env.task(rng.gen_range(0..env.modulus))
}

/// Draws a task with a target uniform over `targets`.
pub fn sample_task_from<R: Rng + ?Sized>(env: &EnvConfig, targets: &[usize], rng: &mut R) -> Result<ModSumTask> {
    if targets.is_empty() {
        return Err(LabError::config("empty target set"));
    }
    env.task(targets[rng.gen_range(0..targets.len())])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task: ModSumTask,
    pub actions: Vec<usize>,
    pub old_logprobs: Vec<f64>,
    /// State in which each action was taken.
    pub states: Vec<usize>,
    pub reward: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Recomputes the terminal reward of a complete trajectory.
pub fn verify_reward(trajectory: &Trajectory) -> Result<f64> {
    let want = trajectory.task.env.seq_len;
    if trajectory.actions.len() != want {
        return Err(LabError::input(format!(
            "incomplete trajectory: {} of {want} tokens",
            trajectory.actions.len()
        )));
    }
    if let Some(&a) = trajectory.actions.iter().find(|&&a| a >= trajectory.task.env.vocab_size) {
        return Err(LabError::input(format!("action {a} outside vocabulary")));
    }
    Ok(if trajectory.task.is_solved(&trajectory.actions) { 1.0 } else { 0.0 })
}

/// `G` responses to one task, all sampled from one snapshot.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub task: ModSumTask,
    pub trajectories: Vec<Trajectory>,
    pub snapshot: PolicySnapshot,
}

impl RolloutGroup {
    pub fn rewards(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.reward).collect()
    }

    pub fn size(&self) -> usize {
        self.trajectories.len()
    }
}

fn check_dims(policy: &TabularPolicy, env: &EnvConfig) -> Result<()> {
    if policy.shape() != (env.num_states(), env.vocab_size) {
        return Err(LabError::input(format!(
            "policy shape {:?} does not fit the task (needs {}x{})",
            policy.shape(),
            env.num_states(),
            env.vocab_size
        )));
    }
    Ok(())
}

/// Samples one complete response from `policy`.
pub fn sample_trajectory<R: Rng + ?Sized>(policy: &TabularPolicy, task: &ModSumTask, rng: &mut R) -> Result<Trajectory> {
    let env = task.env;
    let mut state = task.start_state();
    let mut actions = Vec::with_capacity(env.seq_len);
    let mut old_logprobs = Vec::with_capacity(env.seq_len);
    let mut states = Vec::with_capacity(env.seq_len);
    for _ in 0..env.seq_len {
        let (action, lp) = policy.sample_action(state, rng)?;
        states.push(state);
        actions.push(action);
        old_logprobs.push(lp);
        state = env.transition(state, action);
    }
    let reward = if task.is_solved(&actions) { 1.0 } else { 0.0 };
    Ok(Trajectory {
        task: *task,
        actions,
        old_logprobs,
        states,
        reward,
    })
}

/// Snapshots `policy` and samples a group of `group_size` responses.
pub fn rollout_group<R: Rng + ?Sized>(
    policy: &TabularPolicy,
    task: &ModSumTask,
    group_size: usize,
    rng: &mut R,
) -> Result<RolloutGroup> {
    rollout_group_from_snapshot(&policy.snapshot(), task, group_size, rng)
}

pub fn rollout_group_from_snapshot<R: Rng + ?Sized>(
    snapshot: &PolicySnapshot,
    task: &ModSumTask,
    group_size: usize,
    rng: &mut R,
) -> Result<RolloutGroup> {
    if group_size < 2 {
        return Err(LabError::input(format!("group size must be >= 2, got {group_size}")));
    }
    check_dims(snapshot, &task.env)?;
    let trajectories = (0..group_size)
        .map(|_| sample_trajectory(snapshot, task, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutGroup {
        task: *task,
        trajectories,
        snapshot: snapshot.clone(),
    })
}

/// One line of the rollout log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutRecord {
    pub step: usize,
    pub group: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub modulus: usize,
    pub target: usize,
    pub actions: Vec<usize>,
    pub old_logprobs: Vec<f64>,
    pub reward: f64,
}

impl RolloutRecord {
    pub fn from_trajectory(step: usize, group: usize, t: &Trajectory) -> Self {
        Self {
            step,
            group,
            vocab_size: t.task.env.vocab_size,
            seq_len: t.task.env.seq_len,
            modulus: t.task.env.modulus,
            target: t.task.target,
            actions: t.actions.clone(),
            old_logprobs: t.old_logprobs.clone(),
            reward: t.reward,
        }
    }

    pub fn env(&self) -> EnvConfig {
        EnvConfig {
            vocab_size: self.vocab_size,
            seq_len: self.seq_len,
            modulus: self.modulus,
        }
    }

    /// Rebuilds the trajectory, replaying the state sequence from the task.
    pub fn to_trajectory(&self) -> Result<Trajectory> {
        let task = self.env().task(self.target)?;
        if self.actions.len() != self.old_logprobs.len() {
            return Err(LabError::input("actions and old_logprobs differ in length"));
        }
        let mut state = task.start_state();
        let mut states = Vec::with_capacity(self.actions.len());
        for &a in &self.actions {
            states.push(state);
            state = task.env.transition(state, a);
        }
        Ok(Trajectory {
            task,
            actions: self.actions.clone(),
            old_logprobs: self.old_logprobs.clone(),
            states,
            reward: self.reward,
        })
    }
}

pub fn write_rollout_log<W: Write>(mut out: W, step: usize, groups: &[RolloutGroup]) -> Result<()> {
    for (g, group) in groups.iter().enumerate() {
        for t in &group.trajectories {
            serde_json::to_writer(&mut out, &RolloutRecord::from_trajectory(step, g, t))?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn read_rollout_log<R: BufRead>(input: R) -> Result<Vec<RolloutRecord>> {
    let mut records = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}
