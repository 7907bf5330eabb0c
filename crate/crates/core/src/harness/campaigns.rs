use std::path::Path;

use rayon::prelude::*;

use super::config::{Campaign, ExperimentConfig, Params};
use super::report::{CampaignReport, CampaignRow};
use super::HarnessError;
use crate::info::DiscreteDistribution;
use crate::lemmas::{lemma_suite, DECOMPOSITION_TOLERANCE};
use crate::mdp::random_simplex;
use crate::meta_rl::{
    random_meta_rl_instance, regret1_check, theorem5_check, thm4_bound, MDPEnvironment, MetaRlConfig, NoiseSchedule,
    RegretConfig, RlSubtaskConfig,
};
use crate::offline::{offline_check, OfflineConfig, OfflineEnvironment};
use crate::rng::{derive_seed, derive_seed_path, rng_from_seed, standard_normal, SimRng};
use crate::supervised::{
    random_subtask_instance, random_tiny_instance, theorem1_check, thm2_bound, GibbsLearnerSpec, SubtaskConfig,
    TaskEnvironment,
};

/// Environments read from the config's files, or `Generated` to draw one per
/// row from the row seed.
enum Loaded {
    Generated,
    Tasks(TaskEnvironment, TaskEnvironment),
    Mdps(MDPEnvironment, MDPEnvironment),
    Offline(OfflineEnvironment, OfflineEnvironment),
}

fn read(path: &Path) -> Result<String, HarnessError> {
    if !path.exists() {
        return Err(HarnessError::EnvironmentFileMissing(path.to_path_buf()));
    }
    std::fs::read_to_string(path).map_err(|e| HarnessError::EnvironmentInvalid {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn parse<T, E: std::fmt::Display>(path: &Path, f: impl Fn(&str) -> Result<T, E>) -> Result<T, HarnessError> {
    f(&read(path)?).map_err(|e| HarnessError::EnvironmentInvalid {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn load(config: &ExperimentConfig) -> Result<Loaded, HarnessError> {
    let Some(train) = &config.train_env else {
        return Ok(Loaded::Generated);
    };
    let test = config.test_env.as_ref().unwrap_or(train);
    Ok(match config.campaign {
        Campaign::Lemmas => Loaded::Generated,
        Campaign::Supervised | Campaign::Subtask => Loaded::Tasks(
            parse(train, TaskEnvironment::from_json_str)?,
            parse(test, TaskEnvironment::from_json_str)?,
        ),
        Campaign::Regret if config.params.regret_kind == "offline" => Loaded::Offline(
            parse(train, OfflineEnvironment::from_json_str)?,
            parse(test, OfflineEnvironment::from_json_str)?,
        ),
        Campaign::Metarl | Campaign::SubtaskRl | Campaign::Regret => Loaded::Mdps(
            parse(train, MDPEnvironment::from_json_str)?,
            parse(test, MDPEnvironment::from_json_str)?,
        ),
        Campaign::Offline => Loaded::Offline(
            parse(train, OfflineEnvironment::from_json_str)?,
            parse(test, OfflineEnvironment::from_json_str)?,
        ),
    })
}

/// Everything a row needs besides the environments.
struct Cell {
    n: usize,
    m: usize,
    gamma: f64,
    noise: f64,
}

struct Outcome {
    gap: f64,
    se: f64,
    kl: Option<f64>,
    mi_or_e1: Option<f64>,
    e2: Option<f64>,
    bound: f64,
    holds: bool,
}

fn heaviest(w: &DiscreteDistribution) -> usize {
    (0..w.len()).fold(0, |best, i| if w.prob(i) > w.prob(best) { i } else { best })
}

fn schedule(p: &Params, noise: f64) -> Result<NoiseSchedule, String> {
    NoiseSchedule::constant(
        p.outer_steps,
        p.inner_steps,
        p.batch_size,
        p.outer_rate,
        p.outer_noise * noise,
        p.inner_rate,
        p.inner_noise * noise,
    )
    .map_err(|e| e.to_string())
}

fn gibbs(p: &Params, hypotheses: usize, noise: f64) -> Result<GibbsLearnerSpec, String> {
    GibbsLearnerSpec::new(hypotheses, 3, p.base_temperature / noise, p.meta_temperature / noise, p.coupling)
        .map_err(|e| e.to_string())
}

fn reweighted_pair(env: MDPEnvironment, rng: &mut SimRng) -> Result<(MDPEnvironment, MDPEnvironment), String> {
    let k = env.mdps().len();
    let w = DiscreteDistribution::new(random_simplex(k, rng)).map_err(|e| e.to_string())?;
    let test = env.reweighted(w).map_err(|e| e.to_string())?;
    Ok((env, test))
}

fn mdp_pair(loaded: &Loaded, p: &Params, cell: &Cell, rng: &mut SimRng) -> Result<(MDPEnvironment, MDPEnvironment), String> {
    let (train, test) = match loaded {
        Loaded::Mdps(a, b) => (a.clone(), b.clone()),
        _ => reweighted_pair(
            MDPEnvironment::random(p.registry, p.states, p.actions, cell.gamma, p.horizon, rng).map_err(|e| e.to_string())?,
            rng,
        )?,
    };
    let set = |e: MDPEnvironment| e.with_gamma(cell.gamma).map_err(|e| e.to_string());
    Ok((set(train)?, set(test)?))
}

fn offline_pair(loaded: &Loaded, p: &Params, rng: &mut SimRng) -> Result<(OfflineEnvironment, OfflineEnvironment), String> {
    match loaded {
        Loaded::Offline(a, b) => Ok((a.clone(), b.clone())),
        _ => {
            let train = OfflineEnvironment::random(p.registry, p.states, p.actions, p.horizon, rng).map_err(|e| e.to_string())?;
            let w = DiscreteDistribution::new(random_simplex(p.registry, rng)).map_err(|e| e.to_string())?;
            let test = train.reweighted(w).map_err(|e| e.to_string())?;
            Ok((train, test))
        }
    }
}

fn offline_config(p: &Params, cell: &Cell) -> OfflineConfig {
    OfflineConfig {
        n: cell.n,
        m: cell.m,
        temperature: p.offline_temperature * cell.noise,
        meta_temperature: p.offline_meta_temperature * cell.noise,
        pull: p.pull,
        trials: p.mc_trials,
        replicates: p.replicates,
        resamples: p.resamples,
    }
}

fn run_row(campaign: Campaign, loaded: &Loaded, p: &Params, cell: &Cell, seed: u64) -> Result<Outcome, String> {
    let mut rng = rng_from_seed(derive_seed(seed, 0));
    let run_seed = derive_seed(seed, 1);
    let e = |e: &dyn std::fmt::Display| e.to_string();
    match campaign {
        Campaign::Lemmas => {
            let r = lemma_suite(p.lemma_cases, run_seed).map_err(|x| e(&x))?;
            Ok(Outcome {
                gap: r.decomposition_error.max(r.dv_equality_error).max(r.dpi_violation),
                se: 0.0,
                kl: Some(r.dv_excess),
                mi_or_e1: Some(r.min_information),
                e2: None,
                bound: DECOMPOSITION_TOLERANCE,
                holds: r.passed,
            })
        }
        Campaign::Supervised => {
            let (train, test, spec) = match loaded {
                Loaded::Tasks(a, b) => (a.clone(), b.clone(), gibbs(p, a.hypotheses(), cell.noise)?),
                _ => {
                    let (a, b, mut spec) = random_tiny_instance(&mut rng).map_err(|x| e(&x))?;
                    spec.base_temperature /= cell.noise;
                    spec.meta_temperature /= cell.noise;
                    (a, b, spec)
                }
            };
            let r = theorem1_check(&train, &test, cell.n, cell.m, &spec).map_err(|x| e(&x))?;
            Ok(Outcome {
                gap: r.gap,
                se: 0.0,
                kl: Some(r.kl_datasets),
                mi_or_e1: Some(r.mi_joint),
                e2: None,
                bound: r.bound,
                holds: r.holds,
            })
        }
        Campaign::Subtask => {
            let (env, spec) = match loaded {
                Loaded::Tasks(a, _) => (a.clone(), gibbs(p, a.hypotheses(), cell.noise)?),
                _ => {
                    let (a, mut spec) =
                        random_subtask_instance(p.registry, p.alphabet, p.hypotheses, &mut rng).map_err(|x| e(&x))?;
                    spec.base_temperature /= cell.noise;
                    spec.meta_temperature /= cell.noise;
                    (a, spec)
                }
            };
            let cfg = SubtaskConfig {
                n: cell.n,
                m: cell.m,
                trials: p.mc_trials,
                sign_resamples: p.sign_resamples,
                bins: p.bins,
            };
            let target = match loaded {
                Loaded::Generated => heaviest(env.weights()),
                _ => p.target,
            };
            let r = thm2_bound(&env, target, &spec, &cfg, run_seed).map_err(|x| e(&x))?;
            Ok(Outcome {
                gap: r.estimate.mean,
                se: r.estimate.se,
                kl: None,
                mi_or_e1: Some(r.degenerate_frequency()),
                e2: None,
                bound: r.bound.mean,
                holds: r.holds,
            })
        }
        Campaign::Metarl => {
            let (train, test) = match loaded {
                Loaded::Generated => {
                    let (a, b) = random_meta_rl_instance(&mut rng).map_err(|x| e(&x))?;
                    (a.with_gamma(cell.gamma).map_err(|x| e(&x))?, b.with_gamma(cell.gamma).map_err(|x| e(&x))?)
                }
                _ => mdp_pair(loaded, p, cell, &mut rng)?,
            };
            let cfg = MetaRlConfig {
                n: cell.n,
                schedule: schedule(p, cell.noise)?,
                replicates: p.replicates,
                resamples: p.resamples,
                trials: p.mc_trials,
                e_trials: p.e_trials,
            };
            let r = theorem5_check(&train, &test, &cfg, run_seed).map_err(|x| e(&x))?;
            Ok(Outcome {
                gap: r.report.gap_estimate.mean,
                se: r.report.gap_estimate.se,
                kl: Some(r.report.kl_term),
                mi_or_e1: Some(r.report.e1),
                e2: Some(r.report.e2),
                bound: r.report.bound_value,
                holds: r.report.holds && r.sandwich.holds,
            })
        }
        Campaign::SubtaskRl => {
            let (env, _) = mdp_pair(loaded, p, cell, &mut rng)?;
            let cfg = RlSubtaskConfig {
                n: cell.n,
                schedule: schedule(p, cell.noise)?,
                replicates: p.replicates,
                trials: p.mc_trials,
                sign_resamples: p.sign_resamples,
                bins: p.bins,
            };
            let target = match loaded {
                Loaded::Generated => heaviest(env.weights()),
                _ => p.target,
            };
            let r = thm4_bound(&env, target, &cfg, run_seed).map_err(|x| e(&x))?;
            Ok(Outcome {
                gap: r.estimate.mean,
                se: r.estimate.se,
                kl: None,
                mi_or_e1: Some(r.degenerate_frequency()),
                e2: None,
                bound: r.bound.mean,
                holds: r.holds,
            })
        }
        Campaign::Offline => {
            let (train, test) = offline_pair(loaded, p, &mut rng)?;
            let r = offline_check(&train, &test, &offline_config(p, cell), run_seed).map_err(|x| e(&x))?;
            Ok(Outcome {
                gap: r.gap.mean,
                se: r.gap.se,
                kl: Some(r.kl_term),
                mi_or_e1: Some(r.mi_upper),
                e2: None,
                bound: r.bound,
                holds: r.holds,
            })
        }
        Campaign::Regret if p.regret_kind == "offline" => {
            let (train, test) = offline_pair(loaded, p, &mut rng)?;
            let r = offline_check(&train, &test, &offline_config(p, cell), run_seed).map_err(|x| e(&x))?;
            Ok(Outcome {
                gap: r.regret.left.mean,
                se: r.regret.left.se,
                kl: None,
                mi_or_e1: Some(r.regret.concentrability),
                e2: None,
                bound: r.regret.right,
                holds: r.regret.holds,
            })
        }
        Campaign::Regret => {
            let (train, test) = mdp_pair(loaded, p, cell, &mut rng)?;
            let d = train.param_dim();
            let candidates: Vec<Vec<f64>> = (0..p.candidates)
                .map(|_| (0..d).map(|_| p.candidate_scale * standard_normal(&mut rng)).collect())
                .collect();
            let cfg = RegretConfig {
                n: cell.n,
                schedule: schedule(p, cell.noise)?,
                replicates: p.replicates,
                population_replicates: p.population_replicates,
                trials: p.mc_trials,
            };
            let r = regret1_check(&candidates, &train, &test, &cfg, run_seed).map_err(|x| e(&x))?;
            Ok(Outcome {
                gap: r.left.mean,
                se: r.left.se.hypot(r.right.se),
                kl: None,
                mi_or_e1: None,
                e2: None,
                bound: r.right.mean,
                holds: r.holds,
            })
        }
    }
}

/// Runs every `(cell, trial)` pair in parallel and merges rows in sweep
/// order. Row seeds are `derive_seed_path(master_seed, [cell, trial])`.
pub fn run_campaign(config: &ExperimentConfig) -> Result<CampaignReport, HarnessError> {
    config.validate()?;
    let loaded = load(config)?;
    let cells = config.sweep.cells();
    let cell_seeds: Vec<u64> = (0..cells).map(|c| derive_seed(config.master_seed, c as u64)).collect();
    let rows = (0..cells * config.trials)
        .into_par_iter()
        .map(|job| {
            let (c, trial) = (job / config.trials, job % config.trials);
            let (n, m, gamma, noise) = config.sweep.cell(c);
            let seed = derive_seed_path(config.master_seed, &[c as u64, trial as u64]);
            let cell = Cell { n, m, gamma, noise };
            let out = run_row(config.campaign, &loaded, &config.params, &cell, seed)
                .map_err(|reason| HarnessError::Run { cell: c, trial, reason })?;
            Ok(CampaignRow {
                campaign: config.campaign.to_string(),
                n,
                m,
                gamma,
                noise_scale: noise,
                trial,
                seed,
                gap: out.gap,
                se: out.se,
                kl: out.kl,
                mi_or_e1: out.mi_or_e1,
                e2: out.e2,
                bound: out.bound,
                holds: out.holds,
            }
            .rounded())
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(CampaignReport {
        campaign: config.campaign.to_string(),
        config: config.clone(),
        cell_seeds,
        verdict: rows.iter().all(|r| r.holds),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(campaign: &str, extra: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(
            &format!(
                "campaign = \"{campaign}\"\nmaster_seed = 11\ntrials = 3\n[sweep]\nn = [2, 3]\nm = [2]\ngamma = [0.5, 0.6]\nnoise_scale = [1.0]\n[params]\nmc_trials = 20\nlemma_cases = 20\nresamples = 16\nsign_resamples = 8\nreplicates = 2\npopulation_replicates = 8\n{extra}"
            ),
            None,
        )
        .unwrap()
    }

    #[test]
    fn row_count_and_seeds() {
        let c = config("lemmas", "");
        let r = run_campaign(&c).unwrap();
        assert_eq!(r.rows.len(), 12);
        assert!(r.verdict);
        assert_eq!(r.rows[4].seed, derive_seed_path(11, &[1, 1]));
        assert_eq!(r.cell_seeds.len(), 4);
    }

    #[test]
    fn more_trials_keep_earlier_rows() {
        let mut c = config("supervised", "");
        let three = run_campaign(&c).unwrap();
        c.trials = 4;
        let four = run_campaign(&c).unwrap();
        for row in &three.rows {
            assert!(four.rows.contains(row));
        }
    }

    #[test]
    fn every_campaign_runs_and_replays() {
        for name in ["subtask", "metarl", "offline", "regret"] {
            let mut c = config(name, "outer_steps = 1\ninner_steps = 1\nbatch_size = 1\ne_trials = 2\n");
            c.sweep.n = vec![2];
            c.sweep.gamma = vec![0.5];
            c.trials = 2;
            let a = run_campaign(&c).unwrap();
            assert_eq!(a.rows.len(), 2, "{name}");
            assert_eq!(a, run_campaign(&c).unwrap(), "{name}");
        }
    }

    #[test]
    fn missing_environment_file() {
        let mut c = config("metarl", "");
        c.train_env = Some("/nonexistent/env.json".into());
        assert!(matches!(run_campaign(&c), Err(HarnessError::EnvironmentFileMissing(_))));
    }
}
