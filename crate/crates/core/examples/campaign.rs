//! Run a campaign from a TOML config and write CSV and JSON reports.
//!
//! ```text
//! cargo run --example campaign -- data/configs/offline.toml /tmp/reports
//! ```

use std::path::PathBuf;

use metagen::harness::{emit_report, run_campaign, ExperimentConfig, ReportFormat};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let config = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/data/configs/supervised.toml")));
    let out = args.next().map(PathBuf::from).unwrap_or_else(std::env::temp_dir);

    let config = ExperimentConfig::load(&config, None)?;
    println!("{} campaign, {} cells x {} trials", config.campaign, config.sweep.cells(), config.trials);
    let report = run_campaign(&config)?;
    for row in &report.rows {
        println!(
            "n={:<2} m={:<2} γ={:<4} noise={:<4} trial={} gap={:+.5} bound={:.5} {}",
            row.n,
            row.m,
            row.gamma,
            row.noise_scale,
            row.trial,
            row.gap,
            row.bound,
            if row.holds { "ok" } else { "FAIL" }
        );
    }
    for format in [ReportFormat::Csv, ReportFormat::Json] {
        println!("wrote {}", emit_report(&report, format, &out)?.display());
    }
    Ok(())
}
