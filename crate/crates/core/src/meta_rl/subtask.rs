use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{meta_train, replicate_mean, MDPEnvironment, MetaRlError, NoiseSchedule};
use crate::info::binned_mi_binary;
use crate::mdp::TabularMDP;
use crate::rng::{derive_seed, rademacher, rng_from_seed, sample_index};
use crate::stats::MeanAccumulator;
use crate::supervised::SubtaskReport;

/// `n` pairs of registry indices plus Rademacher selectors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RlSuperSample {
    pub pairs: Vec<(usize, usize)>,
    pub signs: Vec<i8>,
}

impl RlSuperSample {
    pub fn target_count(&self, target: usize) -> usize {
        self.pairs.iter().filter(|(p, q)| *p == target || *q == target).count()
    }
}

pub fn build_rl_supersample(env: &MDPEnvironment, n: usize, seed: u64) -> RlSuperSample {
    let mut data_rng = rng_from_seed(derive_seed(seed, 0));
    let mut sign_rng = rng_from_seed(derive_seed(seed, 1));
    let w = env.weights().probs();
    let pairs = (0..n)
        .map(|_| (sample_index(w, &mut data_rng), sample_index(w, &mut data_rng)))
        .collect();
    let signs = (0..n).map(|_| rademacher(&mut sign_rng)).collect();
    RlSuperSample { pairs, signs }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlSubtaskConfig {
    pub n: usize,
    pub schedule: NoiseSchedule,
    pub replicates: usize,
    pub trials: usize,
    pub sign_resamples: usize,
    pub bins: usize,
}

/// Train on the selected members, then
/// `f_i = 1{ℳ⁻=ℳ̂} E J(π_φ, ℳ⁻) − 1{ℳ⁺=ℳ̂} E J(π_φ, ℳ⁺)`.
fn f_values(
    env: &MDPEnvironment,
    ss: &RlSuperSample,
    signs: &[i8],
    target: usize,
    cfg: &RlSubtaskConfig,
    seed: u64,
) -> Result<Vec<f64>, MetaRlError> {
    let tasks: Vec<TabularMDP> = ss
        .pairs
        .iter()
        .zip(signs)
        .map(|(&(p, q), &u)| env.mdps()[if u > 0 { p } else { q }].clone())
        .collect();
    let log = meta_train(&tasks, &cfg.schedule, derive_seed(seed, 0))?;
    let theta = log.final_theta();
    let mdp = &env.mdps()[target];
    ss.pairs
        .iter()
        .enumerate()
        .map(|(i, &(p, q))| {
            let j = |side: u64| replicate_mean(theta, mdp, &cfg.schedule, cfg.replicates, derive_seed(seed, 2 * i as u64 + side + 1)).map(|e| e.mean);
            let minus = if q == target { j(1)? } else { 0.0 };
            let plus = if p == target { j(0)? } else { 0.0 };
            Ok(minus - plus)
        })
        .collect()
}

/// Subtask gap for one super-sample and sign vector; `None` when no pair
/// touches the target.
pub fn subtask_rl_gap_for_signs(
    env: &MDPEnvironment,
    ss: &RlSuperSample,
    signs: &[i8],
    target: usize,
    cfg: &RlSubtaskConfig,
    seed: u64,
) -> Result<Option<f64>, MetaRlError> {
    let n_target = ss.target_count(target);
    if n_target == 0 {
        return Ok(None);
    }
    let f = f_values(env, ss, signs, target, cfg, seed)?;
    Ok(Some(
        f.iter().zip(signs).map(|(fi, &u)| -(u as f64) * fi).sum::<f64>() / n_target as f64,
    ))
}

fn draw(
    env: &MDPEnvironment,
    target: usize,
    cfg: &RlSubtaskConfig,
    seed: u64,
    with_bound: bool,
) -> Result<Option<(f64, f64)>, MetaRlError> {
    let ss = build_rl_supersample(env, cfg.n, seed);
    let Some(gap) = subtask_rl_gap_for_signs(env, &ss, &ss.signs.clone(), target, cfg, derive_seed(seed, 2))? else {
        return Ok(None);
    };
    if !with_bound {
        return Ok(Some((gap, 0.0)));
    }
    let mut sign_rng = rng_from_seed(derive_seed(seed, 3));
    let mut pairs: Vec<Vec<(i8, f64)>> = vec![Vec::with_capacity(cfg.sign_resamples); cfg.n];
    for r in 0..cfg.sign_resamples {
        let signs: Vec<i8> = (0..cfg.n).map(|_| rademacher(&mut sign_rng)).collect();
        let f = f_values(env, &ss, &signs, target, cfg, derive_seed(seed, 4 + r as u64))?;
        for (i, fi) in f.into_iter().enumerate() {
            pairs[i].push((signs[i], fi));
        }
    }
    let scale = 2.0 / (1.0 - env.gamma()).powi(2);
    let bound = pairs
        .iter()
        .map(|p| (scale * binned_mi_binary(p, cfg.bins)).sqrt())
        .sum::<f64>()
        / ss.target_count(target) as f64;
    Ok(Some((gap, bound)))
}

fn run(
    env: &MDPEnvironment,
    target: usize,
    cfg: &RlSubtaskConfig,
    seed: u64,
    with_bound: bool,
) -> Result<SubtaskReport, MetaRlError> {
    cfg.schedule.validate()?;
    let outcomes = (0..cfg.trials)
        .into_par_iter()
        .map(|t| draw(env, target, cfg, derive_seed(seed, t as u64), with_bound))
        .collect::<Result<Vec<_>, _>>()?;
    let mut gap = MeanAccumulator::default();
    let mut bound = MeanAccumulator::default();
    for (g, b) in outcomes.iter().flatten() {
        gap.push(*g);
        bound.push(*b);
    }
    if gap.count() == 0 {
        return Err(MetaRlError::AllDrawsDegenerate(cfg.trials));
    }
    let (estimate, bound) = (gap.estimate(), bound.estimate());
    Ok(SubtaskReport {
        estimate,
        bound,
        degenerate_draws: cfg.trials - gap.count(),
        total_draws: cfg.trials,
        holds: estimate.mean <= bound.mean + 3.0 * estimate.se.hypot(bound.se),
    })
}

/// Monte Carlo subtask meta-RL gap toward `target` (a registry index).
pub fn gen_sub_rl_estimate(
    env: &MDPEnvironment,
    target: usize,
    cfg: &RlSubtaskConfig,
    seed: u64,
) -> Result<SubtaskReport, MetaRlError> {
    run(env, target, cfg, seed, false)
}

/// Estimate and conditional-MI bound over the same draws.
pub fn thm4_bound(env: &MDPEnvironment, target: usize, cfg: &RlSubtaskConfig, seed: u64) -> Result<SubtaskReport, MetaRlError> {
    run(env, target, cfg, seed, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::info::DiscreteDistribution;

    fn cfg(trials: usize, sched: NoiseSchedule) -> RlSubtaskConfig {
        RlSubtaskConfig {
            n: 4,
            schedule: sched,
            replicates: 3,
            trials,
            sign_resamples: 32,
            bins: 16,
        }
    }

    fn env(seed: u64) -> MDPEnvironment {
        let mut rng = crate::rng::rng_from_seed(seed);
        MDPEnvironment::random(3, 2, 2, 0.6, 2, &mut rng).unwrap()
    }

    #[test]
    fn supersample_is_deterministic() {
        let e = env(1);
        let a = build_rl_supersample(&e, 5, 3);
        assert_eq!(a, build_rl_supersample(&e, 5, 3));
        assert_eq!(a.pairs.len(), 5);
    }

    #[test]
    fn frozen_learner_has_no_gap() {
        let e = env(2);
        let sched = NoiseSchedule::constant(2, 2, 2, 0.0, 0.3, 0.0, 0.3).unwrap();
        let r = gen_sub_rl_estimate(&e, 0, &cfg(600, sched), 4).unwrap();
        assert!(r.estimate.mean.abs() <= 3.0 * r.estimate.se, "{:?}", r.estimate);
    }

    #[test]
    fn bound_respects_cmi_cap_and_dominates() {
        let e = env(3);
        let sched = NoiseSchedule::constant(2, 2, 2, 0.5, 0.1, 0.5, 0.1).unwrap();
        let c = cfg(30, sched);
        let r = thm4_bound(&e, 1, &c, 5).unwrap();
        let cap = 4.0 * (2.0 * std::f64::consts::LN_2 / (1.0 - e.gamma()).powi(2)).sqrt();
        assert!(r.bound.mean <= cap + 1e-12);
        assert!(r.holds);
    }

    #[test]
    fn absent_target_is_degenerate() {
        let e = env(4);
        let e = e.reweighted(DiscreteDistribution::new(vec![0.5, 0.5, 0.0]).unwrap()).unwrap();
        let sched = NoiseSchedule::constant(1, 1, 1, 0.5, 0.1, 0.5, 0.1).unwrap();
        assert_eq!(
            gen_sub_rl_estimate(&e, 2, &cfg(10, sched), 1).unwrap_err(),
            MetaRlError::AllDrawsDegenerate(10)
        );
    }
}
