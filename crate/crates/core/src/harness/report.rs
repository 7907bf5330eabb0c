use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::config::ExperimentConfig;
use super::HarnessError;

pub const REPORT_DIGITS: usize = 12;

/// Rounds to `digits` significant digits; non-finite values pass through.
pub fn round_sig(x: f64, digits: usize) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{:.*e}", digits - 1, x).parse().expect("formatted float parses")
}

/// Finite values as JSON numbers, the rest as `"inf"`, `"-inf"` or `"nan"`.
mod number {
    use super::*;

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    fn to_repr(x: f64) -> Repr {
        if x.is_finite() {
            Repr::Num(x)
        } else if x.is_nan() {
            Repr::Text("nan".into())
        } else if x > 0.0 {
            Repr::Text("inf".into())
        } else {
            Repr::Text("-inf".into())
        }
    }

    fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) => t.parse().map_err(|_| E::custom(format!("not a number: {t}"))),
        }
    }

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        to_repr(*x).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }

    pub mod opt {
        use super::*;

        pub fn serialize<S: Serializer>(x: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            x.map(to_repr).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            Option::<Repr>::deserialize(d)?.map(from_repr).transpose()
        }
    }
}

/// One trial of one sweep cell. Columns absent for a campaign are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignRow {
    pub campaign: String,
    pub n: usize,
    pub m: usize,
    #[serde(with = "number")]
    pub gamma: f64,
    #[serde(with = "number")]
    pub noise_scale: f64,
    pub trial: usize,
    pub seed: u64,
    #[serde(with = "number")]
    pub gap: f64,
    #[serde(with = "number")]
    pub se: f64,
    #[serde(with = "number::opt")]
    pub kl: Option<f64>,
    #[serde(with = "number::opt")]
    pub mi_or_e1: Option<f64>,
    #[serde(with = "number::opt")]
    pub e2: Option<f64>,
    #[serde(with = "number")]
    pub bound: f64,
    pub holds: bool,
}

impl CampaignRow {
    /// Rounds every real column to [`REPORT_DIGITS`] significant digits.
    pub fn rounded(mut self) -> Self {
        let r = |x: f64| round_sig(x, REPORT_DIGITS);
        self.gamma = r(self.gamma);
        self.noise_scale = r(self.noise_scale);
        self.gap = r(self.gap);
        self.se = r(self.se);
        self.kl = self.kl.map(r);
        self.mi_or_e1 = self.mi_or_e1.map(r);
        self.e2 = self.e2.map(r);
        self.bound = r(self.bound);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub campaign: String,
    pub config: ExperimentConfig,
    /// Seed of each sweep cell; row seeds derive from these.
    pub cell_seeds: Vec<u64>,
    pub rows: Vec<CampaignRow>,
    /// True when every row holds.
    pub verdict: bool,
}

impl CampaignReport {
    pub fn failures(&self) -> impl Iterator<Item = &CampaignRow> {
        self.rows.iter().filter(|r| !r.holds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(format!("unknown format `{s}`; expected csv or json")),
        }
    }
}

const CSV_HEADER: [&str; 14] = [
    "campaign", "n", "m", "gamma", "noise_scale", "trial", "seed", "gap", "se", "kl", "mi_or_e1", "e2", "bound", "holds",
];

fn unwritable(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::OutputUnwritable {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn csv_bytes(report: &CampaignReport) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for row in &report.rows {
        w.serialize(row)?;
    }
    Ok(w.into_inner().expect("in-memory writer flushes"))
}

/// Writes `<campaign>.csv` or `<campaign>.json` into `out_dir` and returns the
/// path.
pub fn emit_report(report: &CampaignReport, format: ReportFormat, out_dir: &Path) -> Result<PathBuf, HarnessError> {
    std::fs::create_dir_all(out_dir).map_err(|e| unwritable(out_dir, e))?;
    let (ext, bytes) = match format {
        ReportFormat::Csv => ("csv", csv_bytes(report).map_err(|e| unwritable(out_dir, e))?),
        ReportFormat::Json => (
            "json",
            serde_json::to_vec_pretty(report).expect("report serialization is infallible"),
        ),
    };
    let path = out_dir.join(format!("{}.{ext}", report.campaign));
    std::fs::write(&path, bytes).map_err(|e| unwritable(&path, e))?;
    Ok(path)
}

pub fn read_json_report(path: &Path) -> Result<CampaignReport, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::EnvironmentInvalid {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| HarnessError::EnvironmentInvalid {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
