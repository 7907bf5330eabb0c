use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    empirical_meta_objective, env_kl, meta_gradient_estimate, meta_train, policy, population_meta_objective,
    MDPEnvironment, MetaRlError, NoiseSchedule, TrainLog,
};
use crate::info::{log_det_ratio_term, plugin_mi_labels, sample_covariance};
use crate::mdp::{sampled_gradient, TabularMDP};
use crate::rng::{derive_seed, derive_seed_path, mix64, rng_from_seed, sample_without_replacement};
use crate::stats::{Estimate, MeanAccumulator};

/// Logit grid step used when quantizing learned parameters for plug-in MI.
pub const QUANTIZATION_STEP: f64 = 0.5;

/// `sqrt((2·KL + e1 + e2) / (n (1−γ)²))`.
pub fn thm5_bound(kl_term: f64, e1: f64, e2: f64, n: usize, gamma: f64) -> f64 {
    ((2.0 * kl_term + e1 + e2) / (n as f64 * (1.0 - gamma).powi(2))).sqrt()
}

/// Per-state log-det terms and their sums.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ETerms {
    /// One term per outer state `θ^m`, `m < M`.
    pub outer_terms: Vec<f64>,
    /// One term per inner state `(m, t)`, `m ≤ M`, `t < T`.
    pub inner_terms: Vec<f64>,
    pub e1: f64,
    pub e2: f64,
    pub resamples: usize,
}

/// Resample the batch meta-gradient at every `θ^m` and the stacked inner
/// gradients at every recorded `φ^t_{1:n}`, and accumulate
/// `ln det(rate²/sd² · Σ̂ + I)`.
pub fn estimate_e_terms(
    log: &TrainLog,
    tasks: &[TabularMDP],
    sched: &NoiseSchedule,
    resamples: usize,
    seed: u64,
) -> Result<ETerms, MetaRlError> {
    if resamples < 2 {
        return Err(MetaRlError::InsufficientResamples(resamples));
    }
    let n = tasks.len();
    let mut outer_terms = Vec::with_capacity(sched.outer_steps);
    for m in 0..sched.outer_steps {
        let theta = &log.theta_trace[m];
        let samples = (0..resamples)
            .map(|r| {
                let s = derive_seed_path(seed, &[0, m as u64, r as u64]);
                let batch = sample_without_replacement(n, sched.batch_size, &mut rng_from_seed(s));
                let mut g = vec![0.0; theta.len()];
                for &i in &batch {
                    let gi = meta_gradient_estimate(theta, &tasks[i], sched, derive_seed(s, i as u64 + 1))?;
                    g.iter_mut().zip(&gi).for_each(|(x, y)| *x += y / sched.batch_size as f64);
                }
                Ok(g)
            })
            .collect::<Result<Vec<_>, MetaRlError>>()?;
        let cov = sample_covariance(&samples)?;
        let scale = (sched.outer_rates[m] / sched.outer_noise_sd[m]).powi(2);
        outer_terms.push(log_det_ratio_term(scale, &cov));
    }
    let mut inner_terms = Vec::with_capacity((sched.outer_steps + 1) * sched.inner_steps);
    for snap in &log.adaptation_snapshots {
        for t in 0..sched.inner_steps {
            let mut rng = rng_from_seed(derive_seed_path(seed, &[1, snap.outer_step as u64, t as u64]));
            let samples = (0..resamples)
                .map(|_| {
                    let mut stacked = Vec::new();
                    for (mdp, path) in tasks.iter().zip(&snap.paths) {
                        stacked.extend(sampled_gradient(mdp, &policy(mdp, &path[t])?, &mut rng)?);
                    }
                    Ok(stacked)
                })
                .collect::<Result<Vec<_>, MetaRlError>>()?;
            let cov = sample_covariance(&samples)?;
            let scale = (sched.inner_rates[t] / sched.inner_noise_sd[t]).powi(2);
            inner_terms.push(log_det_ratio_term(scale, &cov));
        }
    }
    Ok(ETerms {
        e1: outer_terms.iter().sum(),
        e2: inner_terms.iter().sum(),
        outer_terms,
        inner_terms,
        resamples,
    })
}

/// Settings for a meta-RL bound run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRlConfig {
    pub n: usize,
    pub schedule: NoiseSchedule,
    /// Adaptations per task when estimating an objective.
    pub replicates: usize,
    /// Gradient resamples per recorded state.
    pub resamples: usize,
    pub trials: usize,
    /// Trials (from the first) that also estimate the log-det terms.
    pub e_trials: usize,
}

/// One training run and its evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRlTrial {
    pub trial: usize,
    pub seed: u64,
    pub tasks: Vec<usize>,
    pub empirical_objective: f64,
    pub population_objective: f64,
    pub gap: f64,
    pub e_terms: Option<ETerms>,
    /// Hash of the quantized `(θ^M, φ^T_{1:n})`.
    pub learner_label: u64,
}

/// Both sides of the meta-RL bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub gap_estimate: Estimate,
    pub kl_term: f64,
    pub e1: f64,
    pub e2: f64,
    pub bound_value: f64,
    pub holds: bool,
}

/// Quantized plug-in MI against the drawn task tuple versus `½(e1 + e2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiSandwich {
    pub plugin_mi: f64,
    pub half_log_det: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem5Report {
    pub report: BoundReport,
    pub sandwich: MiSandwich,
    pub trials: Vec<MetaRlTrial>,
}

/// Hash of parameter vectors rounded to a grid of the given step.
pub fn quantized_label<'a>(vectors: impl IntoIterator<Item = &'a [f64]>, step: f64) -> u64 {
    vectors.into_iter().flatten().fold(0x5EED, |h, x| {
        mix64(h ^ ((x / step).round() as i64 as u64))
    })
}

pub(crate) fn tuple_label(indices: &[usize], registry: usize) -> u64 {
    indices.iter().fold(0u64, |acc, &i| acc * registry as u64 + i as u64)
}

fn run_trial(
    trainenv: &MDPEnvironment,
    testenv: &MDPEnvironment,
    cfg: &MetaRlConfig,
    trial: usize,
    seed: u64,
) -> Result<MetaRlTrial, MetaRlError> {
    let s = derive_seed(seed, trial as u64);
    let idx = trainenv.draw_indices(cfg.n, derive_seed(s, 0));
    let tasks: Vec<TabularMDP> = idx.iter().map(|&i| trainenv.mdps[i].clone()).collect();
    let log = meta_train(&tasks, &cfg.schedule, derive_seed(s, 1))?;
    let theta = log.final_theta();
    let emp = empirical_meta_objective(theta, &tasks, &cfg.schedule, cfg.replicates, derive_seed(s, 2))?;
    let pop = population_meta_objective(theta, testenv, &cfg.schedule, cfg.replicates, derive_seed(s, 3))?;
    let e_terms = if trial < cfg.e_trials {
        Some(estimate_e_terms(&log, &tasks, &cfg.schedule, cfg.resamples, derive_seed(s, 4))?)
    } else {
        None
    };
    let phis = log.final_phis();
    let learner_label = quantized_label(
        std::iter::once(theta).chain(phis.iter().map(Vec::as_slice)),
        QUANTIZATION_STEP,
    );
    Ok(MetaRlTrial {
        trial,
        seed: s,
        tasks: idx,
        empirical_objective: emp.mean,
        population_objective: pop.mean,
        gap: emp.mean - pop.mean,
        e_terms,
        learner_label,
    })
}

fn run_trials(
    trainenv: &MDPEnvironment,
    testenv: &MDPEnvironment,
    cfg: &MetaRlConfig,
    seed: u64,
) -> Result<Vec<MetaRlTrial>, MetaRlError> {
    if cfg.trials < 2 {
        return Err(MetaRlError::InsufficientTrials(cfg.trials));
    }
    (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(trainenv, testenv, cfg, t, seed))
        .collect()
}

/// `E[J_Z(θ) − J_𝒰(θ)]` over training draws, with its standard error.
pub fn rl_gen_gap(
    trainenv: &MDPEnvironment,
    testenv: &MDPEnvironment,
    cfg: &MetaRlConfig,
    seed: u64,
) -> Result<Estimate, MetaRlError> {
    let cfg = MetaRlConfig {
        e_trials: 0,
        ..cfg.clone()
    };
    let trials = run_trials(trainenv, testenv, &cfg, seed)?;
    Ok(Estimate::from_samples(&trials.iter().map(|t| t.gap).collect::<Vec<_>>()))
}

/// Gap, log-det terms, bound and MI sandwich over one set of trials.
pub fn theorem5_check(
    trainenv: &MDPEnvironment,
    testenv: &MDPEnvironment,
    cfg: &MetaRlConfig,
    seed: u64,
) -> Result<Theorem5Report, MetaRlError> {
    if cfg.e_trials == 0 {
        return Err(MetaRlError::InsufficientTrials(0));
    }
    let trials = run_trials(trainenv, testenv, cfg, seed)?;
    let gap = Estimate::from_samples(&trials.iter().map(|t| t.gap).collect::<Vec<_>>());
    let (mut e1, mut e2) = (MeanAccumulator::default(), MeanAccumulator::default());
    for e in trials.iter().filter_map(|t| t.e_terms.as_ref()) {
        e1.push(e.e1);
        e2.push(e.e2);
    }
    let kl_term = env_kl(trainenv, testenv, cfg.n);
    let bound_value = thm5_bound(kl_term, e1.mean(), e2.mean(), cfg.n, trainenv.gamma());
    let learners: Vec<u64> = trials.iter().map(|t| t.learner_label).collect();
    let registry = trainenv.mdps.len();
    let tuples: Vec<u64> = trials.iter().map(|t| tuple_label(&t.tasks, registry)).collect();
    let plugin_mi = plugin_mi_labels(&learners, &tuples);
    let half_log_det = 0.5 * (e1.mean() + e2.mean());
    Ok(Theorem5Report {
        report: BoundReport {
            gap_estimate: gap,
            kl_term,
            e1: e1.mean(),
            e2: e2.mean(),
            bound_value,
            holds: gap.mean <= bound_value + 3.0 * gap.se,
        },
        sandwich: MiSandwich {
            plugin_mi,
            half_log_det,
            holds: plugin_mi <= half_log_det + 0.1,
        },
        trials,
    })
}

/// Random meta-RL bound instance: 2 to 4 MDPs on 2 states and 2 actions, train and
/// test environments sharing the registry with independent weights.
pub fn random_meta_rl_instance<R: rand::Rng + ?Sized>(
    rng: &mut R,
) -> Result<(MDPEnvironment, MDPEnvironment), MetaRlError> {
    let count = rng.random_range(2..=4);
    let gamma = rng.random_range(0.3..0.8);
    let horizon = rng.random_range(1..=3);
    let train = MDPEnvironment::random(count, 2, 2, gamma, horizon, rng)?;
    let test = train.reweighted(crate::info::DiscreteDistribution::new(crate::mdp::random_simplex(
        count, rng,
    ))?)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::info::CovarianceEstimate;
    use crate::rng::{rng_from_seed, standard_normal};

    fn small_cfg(trials: usize, e_trials: usize) -> MetaRlConfig {
        MetaRlConfig {
            n: 4,
            schedule: NoiseSchedule::constant(3, 2, 2, 0.5, 0.05, 0.5, 0.05).unwrap(),
            replicates: 4,
            resamples: 64,
            trials,
            e_trials,
        }
    }

    #[test]
    fn thm5_bound_examples() {
        assert_eq!(thm5_bound(0.0, 0.0, 0.0, 3, 0.5), 0.0);
        assert!((thm5_bound(0.0, 1.5, 0.5, 1, 0.0) - std::f64::consts::SQRT_2).abs() < 1e-12);
        let a = thm5_bound(0.3, 1.0, 2.0, 2, 0.6);
        assert!((a / thm5_bound(0.3, 1.0, 2.0, 8, 0.6) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn constant_gradients_have_no_log_det_terms() {
        let mut rng = rng_from_seed(1);
        let env = MDPEnvironment::random(2, 2, 2, 0.7, 2, &mut rng).unwrap();
        let tasks: Vec<TabularMDP> = env
            .mdps()
            .iter()
            .map(|m| m.with_reward(vec![0.0; 4]).unwrap())
            .collect();
        let sched = NoiseSchedule::constant(2, 2, 1, 0.5, 0.1, 0.5, 0.1).unwrap();
        let log = meta_train(&tasks, &sched, 2).unwrap();
        let e = estimate_e_terms(&log, &tasks, &sched, 16, 3).unwrap();
        assert_eq!((e.e1, e.e2), (0.0, 0.0));
        assert_eq!(e.outer_terms.len(), 2);
        assert_eq!(e.inner_terms.len(), 6);
        assert!(matches!(
            estimate_e_terms(&log, &tasks, &sched, 1, 3),
            Err(MetaRlError::InsufficientResamples(1))
        ));
    }

    #[test]
    fn more_noise_means_smaller_terms() {
        let mut rng = rng_from_seed(2);
        let env = MDPEnvironment::random(2, 2, 2, 0.7, 2, &mut rng).unwrap();
        let tasks = env.mdps().to_vec();
        let sched = NoiseSchedule::constant(2, 2, 2, 0.5, 0.05, 0.5, 0.05).unwrap();
        let log = meta_train(&tasks, &sched, 4).unwrap();
        let base = estimate_e_terms(&log, &tasks, &sched, 32, 5).unwrap();
        let noisy = estimate_e_terms(&log, &tasks, &sched.scale_noise(10.0).unwrap(), 32, 5).unwrap();
        assert!(noisy.e1 + noisy.e2 < base.e1 + base.e2);
        for (a, b) in noisy.inner_terms.iter().zip(&base.inner_terms) {
            assert!(a <= b);
        }
    }

    #[test]
    fn synthetic_variance_oracle() {
        let mut rng = rng_from_seed(3);
        let v: f64 = 2.5;
        let samples: Vec<Vec<f64>> = (0..1000).map(|_| vec![v.sqrt() * standard_normal(&mut rng)]).collect();
        let cov = sample_covariance(&samples).unwrap();
        let (alpha, kappa) = (0.5f64, 0.1f64);
        let term = log_det_ratio_term((alpha / kappa).powi(2), &cov);
        let expected = (alpha * alpha * v / (kappa * kappa) + 1.0).ln();
        assert!((term / expected - 1.0).abs() < 0.1);
        let known = CovarianceEstimate::from_diagonal(&[v]);
        assert!((log_det_ratio_term((alpha / kappa).powi(2), &known) - expected).abs() < 1e-12);
    }

    #[test]
    fn data_independent_learner_on_single_mdp_has_no_gap() {
        let mut rng = rng_from_seed(4);
        let mdp = TabularMDP::random(2, 2, 0.6, 2, &mut rng).unwrap();
        let env = MDPEnvironment::single(mdp);
        let mut cfg = small_cfg(400, 0);
        cfg.schedule = NoiseSchedule::constant(3, 2, 2, 0.0, 0.3, 0.5, 0.05).unwrap();
        let gap = rl_gen_gap(&env, &env, &cfg, 9).unwrap();
        assert!(gap.mean.abs() <= 3.0 * gap.se, "{gap:?}");
    }

    #[test]
    fn gap_within_range_cap() {
        let mut rng = rng_from_seed(5);
        let (train, test) = random_meta_rl_instance(&mut rng).unwrap();
        let cfg = small_cfg(20, 0);
        let cap = 2.0 * train.return_bound();
        let trials = run_trials(&train, &test, &cfg, 2).unwrap();
        for t in &trials {
            assert!(t.gap.abs() <= cap);
            assert!((0.0..=train.return_bound()).contains(&t.empirical_objective));
            assert!((0.0..=train.return_bound()).contains(&t.population_objective));
        }
    }

    #[test]
    fn gap_stable_when_trials_double() {
        let mut rng = rng_from_seed(6);
        let (train, test) = random_meta_rl_instance(&mut rng).unwrap();
        let a = rl_gen_gap(&train, &test, &small_cfg(200, 0), 1).unwrap();
        let b = rl_gen_gap(&train, &test, &small_cfg(400, 0), 2).unwrap();
        assert!((a.mean - b.mean).abs() <= 3.0 * a.se.hypot(b.se));
    }

    #[test]
    fn theorem5_report_is_consistent() {
        let mut rng = rng_from_seed(7);
        let (train, test) = random_meta_rl_instance(&mut rng).unwrap();
        let r = theorem5_check(&train, &test, &small_cfg(40, 4), 3).unwrap();
        let b = &r.report;
        let recomputed = thm5_bound(b.kl_term, b.e1, b.e2, 4, train.gamma());
        assert!((recomputed - b.bound_value).abs() < 1e-12);
        assert!(b.holds);
        assert_eq!(r.trials.iter().filter(|t| t.e_terms.is_some()).count(), 4);
        let again = theorem5_check(&train, &test, &small_cfg(40, 4), 3).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn quantized_labels() {
        let a = [0.1, 0.2];
        let b = [0.9, -0.2];
        assert_eq!(quantized_label([&a[..]], 0.5), quantized_label([&[0.0, 0.0][..]], 0.5));
        assert_ne!(quantized_label([&a[..]], 0.5), quantized_label([&b[..]], 0.5));
    }
}
