//! `obac`: training runs, gate ablations, the noise suite, the motivating
//! study, learning-curve export and the tabular property suite.
//!
//! Exit codes: 0 success, 2 usage, 3 invalid plan or config, 4 environment,
//! 5 training failure, 6 tabular oracle, 7 offline isolation violated,
//! 8 missing input, 9 i/o or serialisation, 10 a property or seed failed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use obac_core::actor::GateMode;
use obac_core::harness::{
    emit_learning_curves, run_ablation_suite, run_experiment, run_motivating_example, run_noise_suite,
    run_tabular_motivating, verify::tabular_verify, CurveMetric, ExperimentPlan, HarnessError, Summary,
};

#[derive(Parser)]
#[command(name = "obac", version, about = "Offline-boosted actor-critic experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a plan in its gate mode.
    Train(PlanArgs),
    /// Run adaptive, fixed_on and off on the same seeds.
    Ablate(PlanArgs),
    /// OBAC and the SAC reduction under several action-noise levels.
    Noise(PlanArgs),
    /// Offline learner trained alongside the SAC reduction; `--env chain-mdp`
    /// runs the exact tabular version.
    Motivate {
        #[command(flatten)]
        plan: PlanArgs,
        /// Skip the rerun that checks the offline learner never acted.
        #[arg(long)]
        no_isolation_check: bool,
    },
    /// Export learning curves of an experiment directory as CSV.
    Curves {
        /// `<out>/<name>` of a finished experiment.
        dir: PathBuf,
        #[arg(long, default_value = "eval_return")]
        metric: String,
        /// Output file; defaults to `<dir>/curves-<metric>.csv`.
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Tabular property suite.
    TabularVerify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Clone)]
struct PlanArgs {
    /// Plan file (TOML); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    env: Option<String>,
    /// Comma-separated seed list.
    #[arg(long, alias = "seed", value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    gate: Option<String>,
    /// Action-noise standard deviation (training and evaluation); the noise
    /// suite takes a comma-separated list and defaults to 0,0.05,0.1.
    #[arg(long, value_delimiter = ',')]
    sigma: Option<Vec<f64>>,
    /// Expectile of the offline value regression.
    #[arg(long)]
    tau: Option<f64>,
    /// Policy-constraint weight.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Experiment name; defaults to the environment name.
    #[arg(long)]
    name: Option<String>,
}

impl PlanArgs {
    fn plan(&self) -> Result<ExperimentPlan, HarnessError> {
        let mut plan = match &self.config {
            Some(path) => ExperimentPlan::load(path)?,
            None => {
                let env = self.env.clone().unwrap_or_else(|| "pendulum".into());
                ExperimentPlan::new(&env, &env, vec![0], 30_000, &PathBuf::from("runs"))
            }
        };
        if let Some(env) = &self.env {
            plan.env = env.clone();
        }
        if let Some(seeds) = &self.seeds {
            plan.seeds = seeds.clone();
        }
        if let Some(steps) = self.steps {
            plan.total_steps = steps;
        }
        match self.sigma.as_deref() {
            None => {}
            Some([sigma]) => plan.action_noise = *sigma,
            Some(_) => return Err(HarnessError::Plan("--sigma takes a single value here".into())),
        }
        if let Some(out) = &self.out {
            plan.out = out.clone();
        }
        if let Some(name) = &self.name {
            plan.name = name.clone();
        }
        if let Some(gate) = &self.gate {
            let mode: GateMode = gate.parse().map_err(|e| HarnessError::Plan(format!("{e}")))?;
            plan.set("gate", mode.as_str())?;
        }
        if let Some(tau) = self.tau {
            plan.set("tau", tau)?;
        }
        if let Some(lambda) = self.lambda {
            plan.set("lambda", lambda)?;
        }
        plan.validate()?;
        Ok(plan)
    }
}

fn exit_code(e: &HarnessError) -> u8 {
    match e {
        HarnessError::Plan(_) | HarnessError::Config(_) => 3,
        HarnessError::Env(_) => 4,
        HarnessError::Agent(_) => 5,
        HarnessError::Tabular(_) => 6,
        HarnessError::Isolation(_) => 7,
        HarnessError::Missing(_) => 8,
        HarnessError::Log(_) | HarnessError::Csv(_) | HarnessError::Json(_) | HarnessError::Io(_) => 9,
    }
}

const FAILED: u8 = 10;

fn print_summary(summary: &Summary) -> u8 {
    match summary.last() {
        Some(c) => {
            let success = c.success_mean.map(|s| format!(", success {s:.3} ± {:.3}", c.success_ci.unwrap_or(0.0))).unwrap_or_default();
            println!(
                "{} [{}] step {}: return {:.2} ± {:.2}{success} over {} seeds",
                summary.name, summary.mode, c.env_step, c.return_mean, c.return_ci, c.n
            );
        }
        None => println!("{} [{}]: no completed evaluations", summary.name, summary.mode),
    }
    for f in &summary.failures {
        println!("  seed {} failed: {}", f.seed, f.error);
    }
    if summary.failures.is_empty() {
        0
    } else {
        FAILED
    }
}

fn run(cli: Cli) -> Result<u8, HarnessError> {
    match cli.command {
        Command::Train(args) => {
            let outcome = run_experiment(&args.plan()?)?;
            Ok(print_summary(&outcome.summary))
        }
        Command::Ablate(args) => {
            let report = run_ablation_suite(&args.plan()?)?;
            let code = report.modes.iter().map(|(_, s)| print_summary(s)).max().unwrap_or(0);
            println!("table: {}", report.table.display());
            Ok(code)
        }
        Command::Noise(mut args) => {
            let sigmas = args.sigma.take().unwrap_or_else(|| vec![0.0, 0.05, 0.1]);
            let plan = args.plan()?;
            let report = run_noise_suite(&plan, &sigmas)?;
            println!("variant  sigma  {}  decline", report.metric);
            for r in &report.rows {
                let d = r.decline_rate.map(|d| format!("{:.2}%", 100.0 * d)).unwrap_or_else(|| "undefined".into());
                println!("{:<8} {:<6} {:<8.3} {d}", r.variant, r.sigma, r.perf);
            }
            println!("table: {}", plan.experiment_dir().join("noise.csv").display());
            Ok(0)
        }
        Command::Motivate { plan: args, no_isolation_check } => {
            if args.env.as_deref() == Some("chain-mdp") {
                let tau = args.tau.unwrap_or(0.99);
                let seed = args.seeds.as_ref().and_then(|s| s.first().copied()).unwrap_or(0);
                let trace = run_tabular_motivating(5, &[100, 1000, 10_000], tau, seed)?;
                println!("{}", serde_json::to_string_pretty(&trace)?);
                return Ok(0);
            }
            let plan = args.plan()?;
            let report = run_motivating_example(&plan, !no_isolation_check)?;
            print_summary(&report.outcome.summary);
            for (seed, windows) in &report.windows {
                println!("seed {seed}: V^mu > V^pi over {windows:?}");
            }
            if !no_isolation_check {
                println!("isolation verified for seeds {:?}", report.isolation_verified);
            }
            Ok(0)
        }
        Command::Curves { dir, metric, file } => {
            let metric: CurveMetric = metric.parse()?;
            let file = file.unwrap_or_else(|| dir.join(format!("curves-{}.csv", metric.name())));
            let n = emit_learning_curves(&dir, metric, &file)?;
            println!("{n} series written to {}", file.display());
            Ok(0)
        }
        Command::TabularVerify { seed } => {
            let results = tabular_verify(seed)?;
            for r in &results {
                println!("{r}");
            }
            Ok(if results.iter().all(|r| r.passed || !r.enforced) { 0 } else { FAILED })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
