use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use surveyopt::allocation::{bethel_solve, neyman_allocation, nso_max_allocation, AllocationProblem};
use surveyopt::pipeline::{report, run_pipeline, run_stage, RunConfig, Stage};
use surveyopt::Error;

/// Multivariate survey allocation with hierarchical-Bayes sample reduction.
#[derive(Debug, Parser)]
#[command(name = "surveyopt", version)]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or output file for `allocate --inputs`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    Synth,
    Baseline,
    Allocate,
    Reduce,
    Mc,
    Report,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Synth => Stage::Synth,
            StageArg::Baseline => Stage::Baseline,
            StageArg::Allocate => Stage::Allocate,
            StageArg::Reduce => Stage::Reduce,
            StageArg::Mc => Stage::Mc,
            StageArg::Report => Stage::Report,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Neyman,
    NsoMax,
    Bethel,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic population.
    Synth,
    /// Draw the baseline sample and summarise it.
    Baseline,
    /// Solve the allocations; with `--inputs`, solve a dumped problem.
    Allocate {
        #[arg(long, value_enum, requires = "inputs")]
        method: Option<MethodArg>,
        /// Problem JSON (variance inputs and targets).
        #[arg(long)]
        inputs: Option<PathBuf>,
        /// Variable index for a Neyman solve.
        #[arg(long, default_value_t = 0)]
        variable: usize,
    },
    /// Search the reduction fraction and fit the reduced sample.
    Reduce,
    /// Run the Monte Carlo evaluation.
    Mc,
    /// Write the run report.
    Report {
        /// Exit with status 4 when an acceptance check fails.
        #[arg(long)]
        strict: bool,
    },
    /// Run every stage, or only `--stage`.
    Pipeline {
        #[arg(long, value_enum)]
        stage: Option<StageArg>,
        #[arg(long)]
        strict: bool,
    },
}

enum Failure {
    Config(String),
    Stage(String),
    Checks,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::TomlDe(_) => Failure::Config(e.to_string()),
            other => Failure::Stage(other.to_string()),
        }
    }
}

fn load_config(cli: &Cli) -> Result<(RunConfig, PathBuf), Failure> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| Failure::Config(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let out = cli.out.clone().or_else(|| config.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    config.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok((config, out))
}

fn solve_dump(method: MethodArg, inputs: &Path, k: usize, config: &RunConfig, out: &Path) -> Result<(), Failure> {
    let problem = AllocationProblem::load(inputs)?;
    let n_vars = problem.inputs.n_variables();
    if k >= n_vars {
        return Err(Failure::Config(format!("--variable {k} out of range (problem has {n_vars})")));
    }
    let alloc = match method {
        MethodArg::Neyman => neyman_allocation(&problem.inputs, k, problem.targets.national[k])?,
        MethodArg::NsoMax => {
            let all = (0..n_vars)
                .map(|j| neyman_allocation(&problem.inputs, j, problem.targets.national[j]))
                .collect::<surveyopt::Result<Vec<_>>>()?;
            nso_max_allocation(&all)?
        }
        MethodArg::Bethel => bethel_solve(&problem.inputs, &problem.targets, config.allocation.bethel)?.allocation,
    };
    alloc.write_csv(out)?;
    println!("total {}", alloc.total());
    Ok(())
}

fn finish_report(dir: &Path, strict: bool) -> Result<(), Failure> {
    let r = report(dir)?;
    for c in &r.checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if strict && !r.all_pass() {
        return Err(Failure::Checks);
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let (config, out) = load_config(cli)?;
    let single = |stage: Stage| run_stage(&config, &out, stage).map(|_| ()).map_err(Failure::from);
    match &cli.command {
        Command::Synth => single(Stage::Synth),
        Command::Baseline => single(Stage::Baseline),
        Command::Allocate { method: Some(m), inputs: Some(p), variable } => solve_dump(*m, p, *variable, &config, &out),
        Command::Allocate { .. } => single(Stage::Allocate),
        Command::Reduce => single(Stage::Reduce),
        Command::Mc => single(Stage::Mc),
        Command::Report { strict } => {
            single(Stage::Report)?;
            finish_report(&out, *strict)
        }
        Command::Pipeline { stage: Some(s), strict } => {
            single((*s).into())?;
            if matches!(s, StageArg::Report) {
                finish_report(&out, *strict)?;
            }
            Ok(())
        }
        Command::Pipeline { stage: None, strict } => {
            run_pipeline(&config, &out)?;
            finish_report(&out, *strict)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Checks) => {
            eprintln!("error: acceptance checks failed");
            ExitCode::from(4)
        }
    }
}
