//! `semslam`: runs confidence traces and runtime sweeps and writes CSV/JSON.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use semslam_core::engine::{QueryMode, SamplePolicy};
use semslam_core::experiments::{run_runtime_sweep, run_trace, SweepAxis, SweepOptions, TraceOptions};
use semslam_core::scenario::{generate, Placement, Scenario, ScenarioOptions};
use semslam_core::Error;

#[derive(Parser)]
#[command(name = "semslam", version, about = "Semantic SLAM hybrid-belief experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write the per-step confidence trace as CSV.
    Trace(TraceArgs),
    /// Time the normalization modes over a range of problem sizes.
    Sweep(SweepArgs),
    /// Generate a scenario and write it as JSON.
    Scenario(ScenarioArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PriorKind {
    Independent,
    Dependent,
}

#[derive(Args)]
struct ScenarioFlags {
    #[arg(long, default_value_t = 5)]
    objects: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, value_enum, default_value = "dependent")]
    prior: PriorKind,
    #[arg(long, default_value = "in")]
    placement: Placement,
    /// Number of retained hypotheses.
    #[arg(long, default_value_t = 8)]
    nin: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ScenarioFlags {
    fn options(&self) -> ScenarioOptions {
        ScenarioOptions {
            n_objects: self.objects,
            n_classes: self.classes,
            seed: self.seed,
            placement: self.placement,
            dependent_prior: matches!(self.prior, PriorKind::Dependent),
            n_retained: self.nin,
            ..Default::default()
        }
    }
}

#[derive(Args)]
struct TraceArgs {
    #[command(flatten)]
    scenario: ScenarioFlags,
    /// Read the scenario from JSON instead of generating it.
    #[arg(long)]
    scenario_in: Option<PathBuf>,
    /// Also write the scenario that was run.
    #[arg(long)]
    scenario_out: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    /// Number of steps; defaults to the whole trajectory.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 2.0)]
    q1: f64,
    #[arg(long, default_value_t = 2.0)]
    q2: f64,
    #[arg(long, value_delimiter = ',', default_value = "naive,exact,bound")]
    modes: Vec<QueryMode>,
    #[arg(long, default_value = "refresh")]
    sample_policy: SamplePolicy,
    /// Multiplier on every measurement noise.
    #[arg(long, default_value_t = 1.0)]
    noise_scale: f64,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, default_value = "objects")]
    axis: SweepAxis,
    /// Sizes along the axis; defaults to 2..=12 objects or 2,4,..,64 classes.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// Size of the other axis; defaults to 2 classes or 3 objects.
    #[arg(long)]
    fixed: Option<usize>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    steps: usize,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 8)]
    nin: usize,
    #[arg(long, default_value_t = 2.0)]
    q1: f64,
    #[arg(long, default_value_t = 2.0)]
    q2: f64,
    #[arg(long, value_delimiter = ',', default_value = "naive,exact,bound,oracle")]
    modes: Vec<QueryMode>,
    /// Oracle mode is skipped for sizes with more hypotheses than this.
    #[arg(long, default_value_t = 1 << 15)]
    oracle_budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON summary with the fitted growth rates.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct ScenarioArgs {
    #[command(flatten)]
    scenario: ScenarioFlags,
    /// JSON destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Config(String),
    Numerical(String),
}

impl Failure {
    fn from_core(e: Error) -> Self {
        match e {
            Error::NonConvergence { .. } | Error::SingularHessian | Error::DegeneratePoint { .. } => {
                Failure::Numerical(e.to_string())
            }
            other => Failure::Config(other.to_string()),
        }
    }
}

fn emit(path: Option<&PathBuf>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::Config(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_scenario(args: &TraceArgs) -> Result<Scenario, Failure> {
    match &args.scenario_in {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            Scenario::from_json(&text).map_err(Failure::from_core)
        }
        None => generate(&args.scenario.options()).map_err(Failure::from_core),
    }
}

fn trace(args: TraceArgs) -> Result<(), Failure> {
    let scenario = load_scenario(&args)?;
    if let Some(p) = &args.scenario_out {
        emit(Some(p), &scenario.to_json().map_err(Failure::from_core)?)?;
    }
    let opts = TraceOptions {
        n_samples: args.samples,
        steps: args.steps,
        q1: args.q1,
        q2: args.q2,
        modes: args.modes,
        sample_policy: args.sample_policy,
        noise_scale: args.noise_scale,
        seed: scenario.seed,
    };
    let run = run_trace(&scenario, &opts).map_err(|e| {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Config(e.to_string())
        }
    })?;
    emit(args.out.as_ref(), &run.to_csv())
}

fn sweep(args: SweepArgs) -> Result<(), Failure> {
    let mut opts = match args.axis {
        SweepAxis::Objects => SweepOptions::objects_default(),
        SweepAxis::Classes => SweepOptions::classes_default(),
    };
    if let Some(sizes) = args.sizes {
        opts.sizes = sizes;
    }
    if let Some(fixed) = args.fixed {
        opts.fixed = fixed;
    }
    opts.trials = args.trials;
    opts.steps = args.steps;
    opts.n_samples = args.samples;
    opts.n_retained = args.nin;
    opts.q1 = args.q1;
    opts.q2 = args.q2;
    opts.modes = args.modes;
    opts.oracle_budget = args.oracle_budget;
    opts.seed = args.seed;

    let result = run_runtime_sweep(&opts).map_err(Failure::from_core)?;
    emit(args.out.as_ref(), &result.to_csv())?;
    if let Some(p) = &args.summary {
        let json = serde_json::to_string_pretty(&result.summary).map_err(|e| Failure::Config(e.to_string()))?;
        emit(Some(p), &(json + "\n"))?;
    }
    Ok(())
}

fn scenario(args: ScenarioArgs) -> Result<(), Failure> {
    let sc = generate(&args.scenario.options()).map_err(Failure::from_core)?;
    emit(args.out.as_ref(), &(sc.to_json().map_err(Failure::from_core)? + "\n"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Trace(a) => trace(a),
        Command::Sweep(a) => sweep(a),
        Command::Scenario(a) => scenario(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(3)
        }
    }
}
