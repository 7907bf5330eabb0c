use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use metagen::harness::{emit_report, run_campaign, Campaign, ExperimentConfig, ReportFormat};

/// Run a bound-verification campaign and write its report.
#[derive(Parser)]
#[command(name = "metagen", version)]
struct Cli {
    /// lemmas, supervised, subtask, metarl, subtask-rl, offline or regret
    campaign: Campaign,
    /// TOML experiment config
    #[arg(long)]
    config: PathBuf,
    /// Output directory (defaults to the config's output_dir, then `.`)
    #[arg(long)]
    out: Option<PathBuf>,
    /// csv or json
    #[arg(long, default_value = "csv")]
    format: ReportFormat,
    /// Exit with status 1 if any row fails its check
    #[arg(long)]
    check: bool,
    /// Override master_seed
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = || -> Result<bool, metagen::harness::HarnessError> {
        let mut config = ExperimentConfig::load(&cli.config, Some(cli.campaign))?;
        if let Some(seed) = cli.seed {
            config.master_seed = seed;
        }
        let report = run_campaign(&config)?;
        let out = cli
            .out
            .clone()
            .or_else(|| config.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("."));
        let path = emit_report(&report, cli.format, &out)?;
        let failed = report.failures().count();
        println!(
            "{}: {} rows, {} failed, report at {}",
            report.campaign,
            report.rows.len(),
            failed,
            path.display()
        );
        for row in report.failures() {
            println!(
                "  FAIL n={} m={} gamma={} noise={} trial={} seed={} gap={} bound={}",
                row.n, row.m, row.gamma, row.noise_scale, row.trial, row.seed, row.gap, row.bound
            );
        }
        Ok(report.verdict)
    };
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) if cli.check => ExitCode::from(1),
        Ok(false) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
