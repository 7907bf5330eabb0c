//! Configuration-driven campaigns over the bound checks, with CSV and JSON
//! reports.
//!
//! A campaign is a sweep over `n × m × γ × noise_scale` cells, each run for
//! `trials` independent seeds. Every row carries the seed that regenerates it.

mod campaigns;
mod config;
mod report;

use std::path::PathBuf;

use thiserror::Error;

pub use campaigns::run_campaign;
pub use config::{Campaign, ExperimentConfig, Params, Sweep};
pub use report::{emit_report, read_json_report, round_sig, CampaignReport, CampaignRow, ReportFormat, REPORT_DIGITS};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config field `{field}`: {reason}")]
    ConfigInvalid { field: String, reason: String },
    #[error("environment file not found: {}", .0.display())]
    EnvironmentFileMissing(PathBuf),
    #[error("cannot read environment file {}: {reason}", path.display())]
    EnvironmentInvalid { path: PathBuf, reason: String },
    #[error("cannot write report to {}: {reason}", path.display())]
    OutputUnwritable { path: PathBuf, reason: String },
    #[error("cell {cell}, trial {trial}: {reason}")]
    Run { cell: usize, trial: usize, reason: String },
}

impl HarnessError {
    pub(crate) fn invalid(field: &str, reason: impl Into<String>) -> Self {
        HarnessError::ConfigInvalid {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}
