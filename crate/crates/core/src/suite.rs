//! Named experiment suites run over shared seeds.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::objectives::ObjectiveSpec;
use crate::trainer::{success_probability, train, BetaSwitch, RunConfig, StepMetrics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    BetaSweep,
    BaselineZoo,
    EntropyReg,
    ScheduleSwitch,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::BetaSweep, Suite::BaselineZoo, Suite::EntropyReg, Suite::ScheduleSwitch];

    pub fn name(self) -> &'static str {
        match self {
            Suite::BetaSweep => "beta_sweep",
            Suite::BaselineZoo => "baseline_zoo",
            Suite::EntropyReg => "entropy_reg",
            Suite::ScheduleSwitch => "schedule_switch",
        }
    }

    /// Labelled configs derived from `base`; seeds and paths are left alone.
    pub fn configs(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        let with = |objective: ObjectiveSpec| RunConfig {
            objective,
            beta_schedule: Vec::new(),
            ..base.clone()
        };
        match self {
            Suite::BetaSweep => [(1.0, 0.5), (0.5, 1.0), (0.75, 1.0), (0.0, 1.0)]
                .into_iter()
                .map(|(b1, b2)| (format!("ce_gppo_b1_{b1}_b2_{b2}"), with(ObjectiveSpec::ce_gppo(b1, b2))))
                .collect(),
            Suite::BaselineZoo => vec![
                ("grpo".into(), with(ObjectiveSpec::grpo())),
                ("dapo".into(), with(ObjectiveSpec::dapo())),
                ("cispo".into(), with(ObjectiveSpec::cispo())),
                ("gspo".into(), with(ObjectiveSpec::gspo())),
                ("ce_gppo".into(), with(ObjectiveSpec::ce_gppo(0.5, 1.0))),
            ],
            Suite::EntropyReg => vec![
                ("grpo".into(), with(ObjectiveSpec::grpo())),
                ("grpo_alpha_0.001".into(), with(ObjectiveSpec::grpo().with_alpha(0.001))),
                ("grpo_alpha_0.003".into(), with(ObjectiveSpec::grpo().with_alpha(0.003))),
                ("ce_gppo".into(), with(ObjectiveSpec::ce_gppo(0.5, 1.0))),
            ],
            Suite::ScheduleSwitch => {
                let switch = (base.total_steps / 2).max(1);
                vec![
                    ("ce_gppo_b1_0_b2_1".into(), with(ObjectiveSpec::ce_gppo(0.0, 1.0))),
                    ("ce_gppo_b1_0.5_b2_1".into(), with(ObjectiveSpec::ce_gppo(0.5, 1.0))),
                    (
                        format!("switch_at_{switch}"),
                        RunConfig {
                            beta_schedule: vec![BetaSwitch {
                                step: switch,
                                beta1: 0.5,
                                beta2: 1.0,
                            }],
                            ..with(ObjectiveSpec::ce_gppo(0.0, 1.0))
                        },
                    ),
                ]
            }
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Suite::ALL.iter().map(|x| x.name()).collect();
            LabError::input(format!("unknown suite {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteRun {
    pub label: String,
    pub seed: u64,
    pub metrics: Vec<StepMetrics>,
    /// Exact mean success probability of the final policy on held-out targets.
    pub final_held_out_success: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub runs: usize,
    pub final_entropy: f64,
    /// Final over initial exact entropy.
    pub final_entropy_ratio: f64,
    pub final_mean_reward: f64,
    pub final_accuracy: f64,
    pub final_held_out_success: f64,
    pub max_kl: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub summary: Vec<SummaryRow>,
    pub runs: Vec<SuiteRun>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Runs every config of `suite` once per seed. With `base.output_dir` set,
/// each run writes into `<dir>/<label>/seed-<seed>/` and the summary goes
/// to `<dir>/summary.csv` and `<dir>/report.json`.
pub fn run_suite(suite: Suite, base: &RunConfig, seeds: &[u64]) -> Result<SuiteReport> {
    if seeds.is_empty() {
        return Err(LabError::input("a suite needs at least one seed"));
    }
    let mut runs = Vec::new();
    let mut summary = Vec::new();
    for (label, config) in suite.configs(base) {
        let mut mine = Vec::new();
        for &seed in seeds {
            let run_config = RunConfig {
                seed,
                output_dir: base
                    .output_dir
                    .as_ref()
                    .map(|d| d.join(&label).join(format!("seed-{seed}"))),
                ..config.clone()
            };
            let out = train(&run_config)?;
            let held_out = &out.split.held_out;
            let mut success = 0.0;
            for &t in held_out {
                success += success_probability(&out.policy, &run_config.env, t)?;
            }
            mine.push(SuiteRun {
                label: label.clone(),
                seed,
                metrics: out.metrics,
                final_held_out_success: success / held_out.len() as f64,
            });
        }
        let last = |r: &SuiteRun| r.metrics.last().cloned().expect("runs have at least one step");
        summary.push(SummaryRow {
            label: label.clone(),
            runs: mine.len(),
            final_entropy: mean(mine.iter().map(|r| last(r).entropy_exact)),
            final_entropy_ratio: mean(mine.iter().map(|r| last(r).entropy_exact / r.metrics[0].entropy_exact)),
            final_mean_reward: mean(mine.iter().map(|r| last(r).mean_reward)),
            final_accuracy: mean(mine.iter().map(|r| last(r).accuracy)),
            final_held_out_success: mean(mine.iter().map(|r| r.final_held_out_success)),
            max_kl: mine
                .iter()
                .flat_map(|r| r.metrics.iter().map(|m| m.kl))
                .fold(0.0, f64::max),
        });
        runs.extend(mine);
    }
    let report = SuiteReport {
        suite,
        seeds: seeds.to_vec(),
        steps: base.total_steps,
        summary,
        runs,
    };
    if let Some(dir) = &base.output_dir {
        write_summary(dir, &report)?;
    }
    Ok(report)
}

fn write_summary(dir: &Path, report: &SuiteReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    for row in &report.summary {
        w.serialize(row)?;
    }
    w.flush()?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    Ok(())
}

/// Plain-text table of the summary rows.
pub fn format_summary(report: &SuiteReport) -> String {
    let mut out = format!(
        "{} over seeds {:?}, {} steps\n{:<24} {:>10} {:>8} {:>8} {:>8} {:>10} {:>8}\n",
        report.suite.name(),
        report.seeds,
        report.steps,
        "config",
        "entropy",
        "H/H0",
        "reward",
        "acc",
        "held-out",
        "max KL"
    );
    for r in &report.summary {
        out.push_str(&format!(
            "{:<24} {:>10.4} {:>8.3} {:>8.3} {:>8.3} {:>10.4} {:>8.4}\n",
            r.label,
            r.final_entropy,
            r.final_entropy_ratio,
            r.final_mean_reward,
            r.final_accuracy,
            r.final_held_out_success,
            r.max_kl
        ));
    }
    out
}
