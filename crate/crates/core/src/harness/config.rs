use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Campaign {
    Lemmas,
    Supervised,
    Subtask,
    Metarl,
    SubtaskRl,
    Offline,
    Regret,
}

impl Campaign {
    pub const ALL: [Campaign; 7] = [
        Campaign::Lemmas,
        Campaign::Supervised,
        Campaign::Subtask,
        Campaign::Metarl,
        Campaign::SubtaskRl,
        Campaign::Offline,
        Campaign::Regret,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Campaign::Lemmas => "lemmas",
            Campaign::Supervised => "supervised",
            Campaign::Subtask => "subtask",
            Campaign::Metarl => "metarl",
            Campaign::SubtaskRl => "subtask-rl",
            Campaign::Offline => "offline",
            Campaign::Regret => "regret",
        }
    }
}

impl std::fmt::Display for Campaign {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Campaign {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Campaign::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown campaign `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub n: Vec<usize>,
    pub m: Vec<usize>,
    pub gamma: Vec<f64>,
    pub noise_scale: Vec<f64>,
}

impl Sweep {
    pub fn cells(&self) -> usize {
        self.n.len() * self.m.len() * self.gamma.len() * self.noise_scale.len()
    }

    /// `(n, m, γ, noise_scale)` of a cell, `n` varying slowest.
    pub fn cell(&self, index: usize) -> (usize, usize, f64, f64) {
        let (ln, lg, ls) = (self.m.len(), self.gamma.len(), self.noise_scale.len());
        let s = index % ls;
        let g = (index / ls) % lg;
        let m = (index / (ls * lg)) % ln;
        let n = index / (ls * lg * ln);
        (self.n[n], self.m[m], self.gamma[g], self.noise_scale[s])
    }
}

/// Campaign knobs. Noise levels are multiplied by the cell's `noise_scale`;
/// Gibbs temperatures are divided by it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    pub lemma_cases: usize,
    /// Inner Monte Carlo trials behind each row's estimate.
    pub mc_trials: usize,
    pub replicates: usize,
    pub population_replicates: usize,
    pub resamples: usize,
    pub e_trials: usize,
    pub sign_resamples: usize,
    pub bins: usize,
    /// Target task of the subtask campaigns for environments read from
    /// files; generated instances target their heaviest task.
    pub target: usize,
    pub outer_steps: usize,
    pub inner_steps: usize,
    pub batch_size: usize,
    pub outer_rate: f64,
    pub inner_rate: f64,
    pub outer_noise: f64,
    pub inner_noise: f64,
    pub base_temperature: f64,
    pub meta_temperature: f64,
    pub coupling: f64,
    pub offline_temperature: f64,
    pub offline_meta_temperature: f64,
    pub pull: f64,
    pub candidates: usize,
    pub candidate_scale: f64,
    /// `meta` for the meta-RL candidate grid, `offline` for the offline chain.
    pub regret_kind: String,
    /// Shape of generated instances when no environment file is given.
    pub registry: usize,
    pub states: usize,
    pub actions: usize,
    pub horizon: usize,
    pub alphabet: usize,
    pub hypotheses: usize,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            lemma_cases: 200,
            mc_trials: 100,
            replicates: 4,
            population_replicates: 32,
            resamples: 64,
            e_trials: 4,
            sign_resamples: 32,
            bins: crate::info::DEFAULT_BINS,
            target: 0,
            outer_steps: 3,
            inner_steps: 2,
            batch_size: 2,
            outer_rate: 0.5,
            inner_rate: 0.5,
            outer_noise: 0.05,
            inner_noise: 0.05,
            base_temperature: 2.0,
            meta_temperature: 5.0,
            coupling: 1.0,
            offline_temperature: 0.3,
            offline_meta_temperature: 0.3,
            pull: 1.0,
            candidates: 4,
            candidate_scale: 2.0,
            regret_kind: "meta".into(),
            registry: 3,
            states: 2,
            actions: 2,
            horizon: 2,
            alphabet: 2,
            hypotheses: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub campaign: Campaign,
    pub master_seed: u64,
    pub trials: usize,
    /// Training environment file; a random instance is generated per row
    /// when absent.
    pub train_env: Option<PathBuf>,
    /// Test environment file; defaults to the training environment.
    pub test_env: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub sweep: Sweep,
    pub params: Params,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    campaign: Option<String>,
    master_seed: Option<u64>,
    trials: Option<usize>,
    train_env: Option<PathBuf>,
    test_env: Option<PathBuf>,
    output_dir: Option<PathBuf>,
    sweep: Option<toml::Table>,
    #[serde(default)]
    params: Params,
}

fn axis<T: for<'de> Deserialize<'de>>(sweep: &toml::Table, name: &str) -> Result<Vec<T>, HarnessError> {
    let field = format!("sweep.{name}");
    let value = sweep
        .get(name)
        .ok_or_else(|| HarnessError::invalid(&field, "missing"))?;
    let values: Vec<T> = value
        .clone()
        .try_into()
        .map_err(|e: toml::de::Error| HarnessError::invalid(&field, e.message().to_string()))?;
    if values.is_empty() {
        return Err(HarnessError::invalid(&field, "sweep axis is empty"));
    }
    Ok(values)
}

impl ExperimentConfig {
    /// Parses TOML; `campaign` may be omitted when `fallback` is given.
    pub fn from_toml_str(text: &str, fallback: Option<Campaign>) -> Result<Self, HarnessError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.contains("field"))
                .unwrap_or("config")
                .to_string();
            HarnessError::ConfigInvalid { field, reason: msg }
        })?;
        let campaign = match (raw.campaign, fallback) {
            (Some(c), Some(f)) => {
                let c: Campaign = c.parse().map_err(|e: String| HarnessError::invalid("campaign", e))?;
                if c != f {
                    return Err(HarnessError::invalid(
                        "campaign",
                        format!("config says `{c}` but `{f}` was requested"),
                    ));
                }
                c
            }
            (Some(c), None) => c.parse().map_err(|e: String| HarnessError::invalid("campaign", e))?,
            (None, Some(f)) => f,
            (None, None) => return Err(HarnessError::invalid("campaign", "missing")),
        };
        let sweep = raw.sweep.ok_or_else(|| HarnessError::invalid("sweep", "missing"))?;
        let unknown: Vec<&String> = sweep
            .keys()
            .filter(|k| !["n", "m", "gamma", "noise_scale"].contains(&k.as_str()))
            .collect();
        if let Some(k) = unknown.first() {
            return Err(HarnessError::invalid(&format!("sweep.{k}"), "unknown sweep axis"));
        }
        let config = ExperimentConfig {
            campaign,
            master_seed: raw
                .master_seed
                .ok_or_else(|| HarnessError::invalid("master_seed", "missing; seeds are never taken from the clock"))?,
            trials: raw.trials.ok_or_else(|| HarnessError::invalid("trials", "missing"))?,
            train_env: raw.train_env,
            test_env: raw.test_env,
            output_dir: raw.output_dir,
            sweep: Sweep {
                n: axis(&sweep, "n")?,
                m: axis(&sweep, "m")?,
                gamma: axis(&sweep, "gamma")?,
                noise_scale: axis(&sweep, "noise_scale")?,
            },
            params: raw.params,
        };
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file; relative paths inside it resolve against its
    /// directory.
    pub fn load(path: &Path, fallback: Option<Campaign>) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::invalid("config", format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml_str(&text, fallback)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut config.train_env, &mut config.test_env, &mut config.output_dir]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialization is infallible")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let s = &self.sweep;
        for (name, len) in [("n", s.n.len()), ("m", s.m.len()), ("gamma", s.gamma.len()), ("noise_scale", s.noise_scale.len())] {
            if len == 0 {
                return Err(HarnessError::invalid(&format!("sweep.{name}"), "sweep axis is empty"));
            }
        }
        if self.trials == 0 {
            return Err(HarnessError::invalid("trials", "must be at least 1"));
        }
        if s.n.contains(&0) {
            return Err(HarnessError::invalid("sweep.n", "values must be positive"));
        }
        if s.m.contains(&0) {
            return Err(HarnessError::invalid("sweep.m", "values must be positive"));
        }
        if s.gamma.iter().any(|g| !(0.0..1.0).contains(g)) {
            return Err(HarnessError::invalid("sweep.gamma", "values must lie in [0, 1)"));
        }
        if s.noise_scale.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(HarnessError::invalid("sweep.noise_scale", "values must be positive and finite"));
        }
        let p = &self.params;
        if p.mc_trials < 2 {
            return Err(HarnessError::invalid("params.mc_trials", "must be at least 2"));
        }
        if !["meta", "offline"].contains(&p.regret_kind.as_str()) {
            return Err(HarnessError::invalid("params.regret_kind", "expected `meta` or `offline`"));
        }
        if p.candidates == 0 {
            return Err(HarnessError::invalid("params.candidates", "must be positive"));
        }
        if self.test_env.is_some() && self.train_env.is_none() {
            return Err(HarnessError::invalid("test_env", "given without train_env"));
        }
        Ok(())
    }

    pub fn expected_rows(&self) -> usize {
        self.sweep.cells() * self.trials
    }
}
