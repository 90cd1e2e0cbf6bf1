use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use cegppo_core::entropy::{
    analyze_rollout_log, center_advantages, predict_entropy_change, verify_predictor_convergence, ProbThreshold,
};
use cegppo_core::env::read_rollout_log;
use cegppo_core::gradcheck::{check_with_random_batch, GradCheckConfig};
use cegppo_core::objectives::{Algorithm, ObjectiveSpec};
use cegppo_core::policy::{Checkpoint, TabularPolicy};
use cegppo_core::rng::stream;
use cegppo_core::suite::{format_summary, run_suite, Suite};
use cegppo_core::trainer::{evaluate, success_probability, target_split, train, RunConfig};
use cegppo_core::LabError;

#[derive(Parser, Debug)]
#[command(name = "cegppo", version, about = "Clipped policy-gradient lab on a tabular sequence task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one policy and write metrics, manifest and checkpoint.
    Train(TrainArgs),
    /// Compare analytic and finite-difference gradients; prints a JSON report.
    Gradcheck(GradcheckArgs),
    /// Predicted vs exact one-step entropy change for a single softmax row.
    EntropyPredict(PredictArgs),
    /// Quadrant, clip and entropy-prediction statistics of a rollout log.
    Analyze(AnalyzeArgs),
    /// Run a named experiment suite over shared seeds.
    Suite(SuiteArgs),
    /// Held-out accuracy of a saved policy.
    Eval(EvalArgs),
}

#[derive(Args, Debug, Clone)]
struct RunOverrides {
    /// JSON run config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// One of ppo, grpo, dapo, cispo, gspo, ce_gppo.
    #[arg(long)]
    algorithm: Option<String>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunOverrides {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => RunConfig::default(),
        };
        if let Some(name) = &self.algorithm {
            c.objective = ObjectiveSpec::for_algorithm(name.parse()?);
        }
        if let Some(b) = self.beta1 {
            c.objective.beta1 = b;
        }
        if let Some(b) = self.beta2 {
            c.objective.beta2 = b;
        }
        if let Some(a) = self.alpha {
            c.objective.alpha = a;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(n) = self.steps {
            c.total_steps = n;
        }
        if let Some(t) = self.threads {
            c.threads = t;
        }
        if self.out.is_some() {
            c.output_dir = self.out.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunOverrides,
    /// Also write every rollout to rollouts.jsonl.
    #[arg(long)]
    log_rollouts: bool,
    /// Print the resolved config and exit.
    #[arg(long)]
    dump_config: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value = "ce_gppo")]
    algorithm: String,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    sequences: usize,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Comma-separated logits of one row.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    logits: Vec<f64>,
    /// Comma-separated per-action advantages.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    advantages: Vec<f64>,
    #[arg(long, default_value_t = 0.01)]
    eta: f64,
    /// Subtract the policy mean from the advantages first.
    #[arg(long)]
    center: bool,
    /// Also report the error ratios for eta, eta/2, eta/4, eta/8.
    #[arg(long)]
    convergence: bool,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Rollout log written by `train --log-rollouts`.
    rollouts: PathBuf,
    /// Policy to take ratios against and to predict entropy changes for.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Clip interval of this algorithm decides the clip flags.
    #[arg(long, default_value = "ce_gppo")]
    algorithm: String,
    #[arg(long, default_value_t = 0.01)]
    eta: f64,
    /// Fixed high/low probability split instead of 1/V.
    #[arg(long)]
    prob_threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct SuiteArgs {
    /// beta_sweep, baseline_zoo, entropy_reg or schedule_switch.
    name: String,
    #[command(flatten)]
    run: RunOverrides,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    checkpoint: PathBuf,
    /// Run config whose env matches the checkpoint; defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Targets to score; the held-out split by default.
    #[arg(long, value_delimiter = ',')]
    targets: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<LabError>() {
        Some(LabError::Config(_)) | Some(LabError::Input(_)) => 2,
        Some(LabError::StabilityAlarm { .. }) | Some(LabError::NonFinite { .. }) => 3,
        Some(LabError::EmptyBatch { .. }) => 4,
        _ => 1,
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut config = args.run.resolve()?;
    config.log_rollouts |= args.log_rollouts;
    if args.dump_config {
        println!("{}", config.to_json()?);
        return Ok(());
    }
    if config.log_rollouts && config.output_dir.is_none() {
        bail!(LabError::Config("--log-rollouts needs an output directory".into()));
    }
    let out = train(&config)?;
    let first = &out.metrics[0];
    let last = out.metrics.last().expect("at least one step");
    let breaches = out.kl_breaches(config.kl_ceiling);
    println!(
        "{} seed {}: {} steps, entropy {:.4} -> {:.4}, reward {:.3} -> {:.3}, held-out acc {:.3}, KL over {} in {} steps",
        config.objective.algorithm.name(),
        config.seed,
        out.metrics.len(),
        first.entropy_exact,
        last.entropy_exact,
        first.mean_reward,
        last.mean_reward,
        last.accuracy,
        config.kl_ceiling,
        breaches
    );
    if let Some(dir) = &config.output_dir {
        info!("wrote {}", dir.display());
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> anyhow::Result<bool> {
    let algorithm: Algorithm = args.algorithm.parse()?;
    let mut spec = ObjectiveSpec::for_algorithm(algorithm).with_alpha(args.alpha);
    if let Some(b) = args.beta1 {
        spec.beta1 = b;
    }
    if let Some(b) = args.beta2 {
        spec.beta2 = b;
    }
    let report = check_with_random_batch(&spec, args.seed, args.sequences, &GradCheckConfig::default())?;
    print_json(&report)?;
    Ok(report.passed)
}

fn cmd_predict(args: PredictArgs) -> anyhow::Result<()> {
    let n = args.logits.len();
    let policy = TabularPolicy::from_logits(ndarray_row(&args.logits)?)?;
    let probs = policy.action_probabilities(0)?;
    let adv = if args.center {
        center_advantages(&probs, &args.advantages)
    } else {
        args.advantages.clone()
    };
    if adv.len() != n {
        bail!(LabError::Input(format!("{} advantages for {n} logits", adv.len())));
    }
    let prediction = predict_entropy_change(&policy, 0, &adv, args.eta)?;
    if args.convergence {
        let etas: Vec<f64> = (0..4).map(|k| args.eta / f64::from(1u32 << k)).collect();
        let report = verify_predictor_convergence(&policy, 0, &adv, &etas)?;
        print_json(&serde_json::json!({ "prediction": prediction, "convergence": report }))
    } else {
        print_json(&prediction)
    }
}

fn ndarray_row(values: &[f64]) -> anyhow::Result<ndarray::Array2<f64>> {
    Ok(ndarray::Array2::from_shape_vec((1, values.len()), values.to_vec())?)
}

fn cmd_analyze(args: AnalyzeArgs) -> anyhow::Result<()> {
    let file = File::open(&args.rollouts).with_context(|| format!("opening {}", args.rollouts.display()))?;
    let records = read_rollout_log(BufReader::new(file))?;
    let policy = match &args.checkpoint {
        Some(path) => Some(Checkpoint::load(path)?.to_policy()?),
        None => None,
    };
    let spec = ObjectiveSpec::for_algorithm(args.algorithm.parse()?);
    let threshold = match args.prob_threshold {
        Some(t) => ProbThreshold::Fixed(t),
        None => ProbThreshold::Uniform,
    };
    let analysis = analyze_rollout_log(&records, policy.as_ref(), &spec, threshold, args.eta)?;
    print_json(&analysis)
}

fn cmd_suite(args: SuiteArgs) -> anyhow::Result<()> {
    let suite: Suite = args.name.parse()?;
    let base = args.run.resolve()?;
    let report = run_suite(suite, &base, &args.seeds)?;
    print!("{}", format_summary(&report));
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let env = match &args.config {
        Some(path) => RunConfig::load(path)?.env,
        None => RunConfig::default().env,
    };
    let policy = Checkpoint::load(&args.checkpoint)?.to_policy()?;
    let split = target_split(env.modulus);
    let targets = if args.targets.is_empty() {
        split.held_out.clone()
    } else {
        args.targets.clone()
    };
    let mut report = evaluate(&policy, &env, &targets, args.samples, &mut stream(args.seed, "eval-cli", 0))?;
    report.reused_training_targets = targets.iter().any(|t| split.train.contains(t));
    let exact = targets
        .iter()
        .map(|&t| success_probability(&policy, &env, t).map(|p| (t, p)))
        .collect::<cegppo_core::Result<Vec<_>>>()?;
    print_json(&serde_json::json!({ "sampled": report, "exact_success": exact }))
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::EntropyPredict(a) => cmd_predict(a).map(|_| true),
        Command::Analyze(a) => cmd_analyze(a).map(|_| true),
        Command::Suite(a) => cmd_suite(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
