use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ntklab::harness::{run_with_threads, threads_from_env, Experiment, ExperimentConfig, Status};
use ntklab::NtkError;

#[derive(Parser)]
#[command(
    name = "ntklab",
    version,
    about = "Run NTK-regime claim checks and write their artifacts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full-batch GD over a width sweep
    Train(RunArgs),
    /// GD with held-out test error at the minimum-risk iterate
    Gen(RunArgs),
    /// Online SGD and the martingale inequality
    Sgd(RunArgs),
    /// Kernel margin and witness on one dataset
    Margin(RunArgs),
    /// Closed-form kernels against Monte Carlo
    Kernel(RunArgs),
    /// 2-XOR population margin
    XorMargin(RunArgs),
    /// Degenerate activation patterns at small width
    NtkLb(RunArgs),
    /// Kernel margin under random labels
    RandomLabel(RunArgs),
    /// Kernel SGD sample complexity against dimension
    KernelComplexity(RunArgs),
    /// Initialization lemmas across seeds
    InitLemmas(RunArgs),
    /// Every experiment with its defaults, one subdirectory each
    All(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// key=value, applied after the config file
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

enum Failure {
    Validation(String),
    Internal(String),
}

impl From<NtkError> for Failure {
    fn from(e: NtkError) -> Self {
        match e {
            NtkError::Config(_)
            | NtkError::InvalidParameter { .. }
            | NtkError::AcceptanceTooLow { .. } => Failure::Validation(e.to_string()),
            NtkError::CapExceeded { .. } | NtkError::Json(_) => Failure::Validation(e.to_string()),
            _ => Failure::Internal(e.to_string()),
        }
    }
}

fn resolve(experiment: Experiment, args: &RunArgs) -> Result<ExperimentConfig, Failure> {
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    let config = match &args.config {
        Some(path) => ExperimentConfig::from_file(experiment, path, &overrides),
        None => ExperimentConfig::resolve(experiment, None, &overrides),
    };
    config.map_err(|e| match e {
        NtkError::Io(io) => Failure::Validation(format!("cannot read config: {io}")),
        other => Failure::from(other),
    })
}

fn run_one(
    config: &ExperimentConfig,
    out: &Path,
    threads: Option<usize>,
) -> Result<Status, Failure> {
    let artifacts = run_with_threads(config, threads)?;
    artifacts
        .write_to(out)
        .map_err(|e| Failure::Internal(e.to_string()))?;
    let status = artifacts.status();
    let label = serde_json::to_value(status).expect("status serializes");
    println!(
        "{}: {} -> {}",
        config.experiment,
        label.as_str().unwrap_or("?"),
        out.display()
    );
    Ok(status)
}

fn execute(command: Command) -> Result<Status, Failure> {
    let threads = threads_from_env()?;
    let (experiments, args, all) = match command {
        Command::Train(a) => (vec![Experiment::Train], a, false),
        Command::Gen(a) => (vec![Experiment::Gen], a, false),
        Command::Sgd(a) => (vec![Experiment::Sgd], a, false),
        Command::Margin(a) => (vec![Experiment::Margin], a, false),
        Command::Kernel(a) => (vec![Experiment::Kernel], a, false),
        Command::XorMargin(a) => (vec![Experiment::XorMargin], a, false),
        Command::NtkLb(a) => (vec![Experiment::NtkLb], a, false),
        Command::RandomLabel(a) => (vec![Experiment::RandomLabel], a, false),
        Command::KernelComplexity(a) => (vec![Experiment::KernelComplexity], a, false),
        Command::InitLemmas(a) => (vec![Experiment::InitLemmas], a, false),
        Command::All(a) => (Experiment::ALL.to_vec(), a, true),
    };
    if all && args.config.is_some() {
        return Err(Failure::Validation(
            "`all` takes no --config; use --override".into(),
        ));
    }
    let mut statuses = Vec::new();
    for experiment in experiments {
        let config = resolve(experiment, &args)?;
        let out = match &args.out {
            Some(dir) if all => dir.join(experiment.name()),
            Some(dir) => dir.clone(),
            None => PathBuf::from(&config.out_dir),
        };
        statuses.push(run_one(&config, &out, threads)?);
    }
    Ok(Status::combine(statuses))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(Status::Fail) => ExitCode::from(2),
        Ok(_) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(3)
        }
    }
}
