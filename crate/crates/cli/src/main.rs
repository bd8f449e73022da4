use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wsc_cli::error::EXIT_OK;
use wsc_cli::run::{self, Run};
use wsc_cli::{CliError, CliResult, Overrides, RunReport, RunSpec};

#[derive(Parser)]
#[command(name = "wsc", version, about = "Wafer-scale chip / training strategy design-space exploration")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// List feasible wafer configurations.
    Enumerate(RunArgs),
    /// Evaluate one fixed strategy on one wafer.
    Evaluate(RunArgs),
    /// Search strategies across every configured wafer.
    Search(RunArgs),
    /// Check and summarize a report.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Run-spec TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: the spec's `output_dir`, else `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    population: Option<usize>,
    /// Skip genetic refinement.
    #[arg(long)]
    fast: bool,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Report JSON produced by another command.
    report: PathBuf,
}

fn load(args: &RunArgs) -> CliResult<(RunSpec, String, PathBuf)> {
    let bytes = fs::read(&args.config)
        .map_err(|e| CliError::Schema(format!("{}: {e}", args.config.display())))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|e| CliError::Schema(format!("{}: {e}", args.config.display())))?;
    let mut spec = RunSpec::parse(&text)?;
    spec.apply(&Overrides {
        seed: args.seed,
        omega: args.omega,
        steps: args.steps,
        population: args.population,
        fast: args.fast,
    });
    spec.validate()?;
    let out = args
        .out
        .clone()
        .or_else(|| spec.output_dir.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((spec, run::sha256_hex(&bytes), out))
}

fn execute(args: &RunArgs, f: fn(&RunSpec, &str, Option<&Path>) -> CliResult<Run>) -> CliResult<()> {
    let (spec, hash, out) = load(args)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = args.threads {
        pool = pool.num_threads(n.max(1));
    }
    let pool = pool.build().map_err(|e| CliError::Internal(e.to_string()))?;
    let run = pool.install(|| f(&spec, &hash, Some(&out)))?;
    let path = run::write_run(&out, &run)?;
    print!("{}", run::summarize(&run.report));
    println!("report written to {}", path.display());
    match run.failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn report(args: &ReportArgs) -> CliResult<()> {
    let text = fs::read_to_string(&args.report)
        .map_err(|e| CliError::Schema(format!("{}: {e}", args.report.display())))?;
    let r = RunReport::from_json(&text)?;
    if RunReport::from_json(&r.to_json())? != r {
        return Err(CliError::Internal("report does not round-trip".into()));
    }
    r.spec.validate()?;
    print!("{}", run::summarize(&r));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Enumerate(a) => execute(a, |s, h, _| run::cmd_enumerate(s, h)),
        Cmd::Evaluate(a) => execute(a, run::cmd_evaluate),
        Cmd::Search(a) => execute(a, run::cmd_search),
        Cmd::Report(a) => report(a),
    };
    match res {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
