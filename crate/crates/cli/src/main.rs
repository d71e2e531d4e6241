use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use hierpop::{load_scenario, CliError, Command, Runner};

/// Steady states, simulation and stability of hierarchical size-structured populations.
#[derive(Debug, Parser)]
#[command(name = "hierpop", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// scenario file (JSON)
    #[arg(long)]
    scenario: PathBuf,
    /// output directory; defaults to the scenario's `output_dir`, then `out/<name>`
    #[arg(long)]
    out: Option<PathBuf>,
    /// worker threads for parallel stages
    #[arg(long)]
    threads: Option<usize>,
    /// treat assumption violations as errors
    #[arg(long)]
    strict: bool,
}

fn fail(err: &CliError) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(err.exit_code() as u8)
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(k) = args.threads {
        if k == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
        {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let loaded = match load_scenario(&args.scenario, args.strict) {
        Ok(l) => l,
        Err(e) => return fail(&e),
    };
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    let out = args
        .out
        .or_else(|| loaded.scenario.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(&loaded.scenario.name));
    let outcome =
        match Runner::new(args.command, loaded.scenario, loaded.warnings, out.clone()).run() {
            Ok(o) => o,
            Err(e) => return fail(&e),
        };
    for line in &outcome.report.summary {
        println!("{line}");
    }
    println!("report: {}", out.join("report.json").display());
    match &outcome.failure {
        Some(e) => fail(e),
        None => ExitCode::SUCCESS,
    }
}
