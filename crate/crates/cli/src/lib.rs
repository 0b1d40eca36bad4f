//! Experiment driver: config parsing, phantom generation, subcommands, and
//! structured run reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod phantoms;
pub mod report;
pub mod verify;

use std::path::Path;

use clap::ValueEnum;
use log::{error, info};

use crate::commands::Context;
use crate::config::ExperimentConfig;
use crate::error::{exit, CliError, CliResult};
use crate::output::OutputDir;
use crate::report::RunReport;

pub const REPORT_NAME: &str = "report.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Subcommand {
    Forward,
    Synth,
    ReconFree,
    ReconScatter,
    CertifyIsotropic,
    Verify,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Forward => "forward",
            Subcommand::Synth => "synth",
            Subcommand::ReconFree => "recon-free",
            Subcommand::ReconScatter => "recon-scatter",
            Subcommand::CertifyIsotropic => "certify-isotropic",
            Subcommand::Verify => "verify",
        }
    }
}

fn prepare(
    config: &Path,
    output: Option<&Path>,
    report: &mut RunReport,
) -> CliResult<(Context, std::path::PathBuf)> {
    let cfg = ExperimentConfig::load(config)?;
    report.config = serde_json::to_value(&cfg).ok();
    let base = config.parent().unwrap_or(Path::new("."));
    let dir = output
        .map(Path::to_path_buf)
        .or_else(|| cfg.output.as_ref().map(|o| config::resolve(o, base)))
        .ok_or_else(|| {
            CliError::Config("no output directory: pass --output or set `output`".into())
        })?;
    Ok((Context::new(cfg, base)?, dir))
}

fn dispatch(
    cmd: Subcommand,
    ctx: &Context,
    out: &mut OutputDir,
    report: &mut RunReport,
) -> CliResult<()> {
    match cmd {
        Subcommand::Forward => commands::forward(ctx, out, report),
        Subcommand::Synth => commands::synth(ctx, out, report),
        Subcommand::ReconFree => commands::recon_free(ctx, out, report),
        Subcommand::ReconScatter => commands::recon_scatter(ctx, out, report),
        Subcommand::CertifyIsotropic => commands::certify_isotropic(ctx, out, report),
        Subcommand::Verify => commands::verify(ctx, out, report),
    }?;
    let failed = report.failed_checks();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "checks failed: {}",
            failed.join(", ")
        )))
    }
}

fn finish(report: &mut RunReport, result: CliResult<()>) {
    match result {
        Ok(()) => {
            report.success = true;
            report.exit_code = exit::OK;
        }
        Err(e) => {
            error!("{e}");
            report.success = false;
            report.exit_code = e.exit_code();
            report.error = Some(e.to_string());
        }
    }
}

/// Runs one subcommand. Config errors are detected before the output
/// directory is touched. Once it is open, `report.json` is written there on
/// every path; the report is also returned for printing.
pub fn run(cmd: Subcommand, config: &Path, output: Option<&Path>) -> RunReport {
    let mut report = RunReport::new(cmd.name());
    let (ctx, dir) = match prepare(config, output, &mut report) {
        Ok(v) => v,
        Err(e) => {
            finish(&mut report, Err(e));
            return report;
        }
    };
    let mut out = match OutputDir::open(&dir) {
        Ok(o) => o,
        Err(e) => {
            finish(&mut report, Err(e));
            return report;
        }
    };
    info!("{} -> {}", cmd.name(), dir.display());
    let result = dispatch(cmd, &ctx, &mut out, &mut report);
    finish(&mut report, result);
    report.artifacts = out.written().to_vec();
    report.artifacts.push(REPORT_NAME.to_string());
    if let Err(e) = out.write_json(REPORT_NAME, &report) {
        error!("could not write the run report: {e}");
        if report.success {
            report.success = false;
            report.exit_code = e.exit_code();
            report.error = Some(e.to_string());
        }
    }
    report
}
