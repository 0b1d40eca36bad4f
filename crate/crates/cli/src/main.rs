use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use tpa_cli::{run, Subcommand};

/// Forward solves, data synthesis, reconstructions and certificates for the
/// semilinear transport equation with two-photon absorption.
#[derive(Debug, Parser)]
#[command(name = "tpa", version)]
struct Args {
    #[arg(value_enum)]
    command: Subcommand,

    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,

    /// Output directory; overrides `output` in the config.
    #[arg(long)]
    output: Option<PathBuf>,

    /// Worker threads for the solvers; defaults to one per core.
    #[arg(long, env = "TPA_THREADS")]
    threads: Option<usize>,

    /// Debug-level logging.
    #[arg(long)]
    verbose: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let level = if args.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Some(n) = args.threads.filter(|&n| n > 0) {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("thread pool already configured: {e}");
        }
    }
    let report = run(args.command, &args.config, args.output.as_deref());
    match serde_json::to_string_pretty(&report) {
        Ok(text) => println!("{text}"),
        Err(e) => log::error!("could not print the run report: {e}"),
    }
    ExitCode::from(report.exit_code as u8)
}
