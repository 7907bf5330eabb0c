use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{empirical_meta_objective, population_meta_objective, MDPEnvironment, MetaRlError, NoiseSchedule};
use crate::mdp::TabularMDP;
use crate::rng::derive_seed;
use crate::stats::Estimate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretConfig {
    pub n: usize,
    pub schedule: NoiseSchedule,
    /// Adaptations per task for the per-trial empirical objectives.
    pub replicates: usize,
    /// Adaptations per MDP for the population objectives, computed once.
    pub population_replicates: usize,
    pub trials: usize,
}

/// Both sides of `E[J_𝒰(θ*) − J_𝒰(θ̂)] ≤ gen(θ̂) − gen(θ*)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regret1Report {
    pub left: Estimate,
    pub right: Estimate,
    /// Index of the population-optimal candidate.
    pub best_candidate: usize,
    pub population_objectives: Vec<Estimate>,
    /// Empirically chosen candidate per trial.
    pub chosen: Vec<usize>,
    pub holds: bool,
}

fn argmax(values: &[f64]) -> usize {
    // first maximum wins
    values
        .iter()
        .enumerate()
        .fold(0, |best, (i, v)| if *v > values[best] { i } else { best })
}

/// `θ̂` maximizes the empirical objective on each drawn training set, `θ*`
/// maximizes the population objective under `testenv`.
pub fn regret1_check(
    candidates: &[Vec<f64>],
    trainenv: &MDPEnvironment,
    testenv: &MDPEnvironment,
    cfg: &RegretConfig,
    seed: u64,
) -> Result<Regret1Report, MetaRlError> {
    if cfg.trials < 2 {
        return Err(MetaRlError::InsufficientTrials(cfg.trials));
    }
    let population = candidates
        .iter()
        .enumerate()
        .map(|(c, theta)| {
            population_meta_objective(theta, testenv, &cfg.schedule, cfg.population_replicates, derive_seed(seed, c as u64))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let pop: Vec<f64> = population.iter().map(|e| e.mean).collect();
    let best = argmax(&pop);
    let per_trial = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let s = derive_seed(derive_seed(seed, u64::MAX), t as u64);
            let idx = trainenv.draw_indices(cfg.n, derive_seed(s, 0));
            let tasks: Vec<TabularMDP> = idx.iter().map(|&i| trainenv.mdps()[i].clone()).collect();
            let emp: Vec<f64> = candidates
                .iter()
                .enumerate()
                .map(|(c, theta)| {
                    empirical_meta_objective(theta, &tasks, &cfg.schedule, cfg.replicates, derive_seed(s, c as u64 + 1))
                        .map(|e| e.mean)
                })
                .collect::<Result<_, _>>()?;
            let chosen = argmax(&emp);
            let left = pop[best] - pop[chosen];
            let right = (emp[chosen] - pop[chosen]) - (emp[best] - pop[best]);
            Ok((chosen, left, right))
        })
        .collect::<Result<Vec<_>, MetaRlError>>()?;
    let left = Estimate::from_samples(&per_trial.iter().map(|x| x.1).collect::<Vec<_>>());
    let right = Estimate::from_samples(&per_trial.iter().map(|x| x.2).collect::<Vec<_>>());
    Ok(Regret1Report {
        holds: left.mean <= right.mean + 3.0 * left.se.hypot(right.se),
        left,
        right,
        best_candidate: best,
        population_objectives: population,
        chosen: per_trial.iter().map(|x| x.0).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_from_seed, standard_normal};

    fn cfg(trials: usize) -> RegretConfig {
        RegretConfig {
            n: 4,
            schedule: NoiseSchedule::constant(1, 2, 2, 0.0, 1.0, 0.5, 0.1).unwrap(),
            replicates: 4,
            population_replicates: 32,
            trials,
        }
    }

    #[test]
    fn single_candidate_has_zero_sides() {
        let mut rng = rng_from_seed(1);
        let env = MDPEnvironment::random(2, 2, 2, 0.6, 2, &mut rng).unwrap();
        let r = regret1_check(&[vec![0.0; 4]], &env, &env, &cfg(10), 2).unwrap();
        assert_eq!((r.left.mean, r.right.mean), (0.0, 0.0));
        assert!(r.holds);
    }

    #[test]
    fn inequality_holds_on_random_candidates() {
        let mut rng = rng_from_seed(2);
        let (train, test) = super::super::random_meta_rl_instance(&mut rng).unwrap();
        let cands: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..4).map(|_| 2.0 * standard_normal(&mut rng)).collect())
            .collect();
        let r = regret1_check(&cands, &train, &test, &cfg(50), 3).unwrap();
        assert!(r.left.mean >= 0.0);
        assert!(r.holds, "{r:?}");
    }

    #[test]
    fn left_side_vanishes_with_plenty_of_data() {
        let mut rng = rng_from_seed(3);
        let env = MDPEnvironment::random(2, 2, 2, 0.6, 2, &mut rng).unwrap();
        let cands: Vec<Vec<f64>> = vec![vec![3.0, -3.0, 3.0, -3.0], vec![-3.0, 3.0, -3.0, 3.0]];
        let mut c = cfg(20);
        c.n = 40;
        c.replicates = 16;
        let r = regret1_check(&cands, &env, &env, &c, 4).unwrap();
        assert!(r.left.mean < 0.05, "{:?}", r.left);
    }
}
