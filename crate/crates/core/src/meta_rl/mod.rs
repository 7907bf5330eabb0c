//! Noisy iterative meta-gradient RL on tabular MDPs.
//!
//! Inner adaptation starts every task at the meta-parameter and takes `T`
//! noisy REINFORCE steps, one trajectory per step. The outer loop averages
//! first-order meta-gradients over a batch of tasks and adds isotropic noise.
//! Every visited state is recorded so that the gradient covariances behind the
//! log-det terms can be resampled afterwards.

mod bounds;
mod regret;
mod subtask;

pub use bounds::*;
pub use regret::*;
pub use subtask::*;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::info::{kl_slices, DiscreteDistribution, InfoError};
use crate::mdp::{exact_return, sampled_gradient, MdpError, SoftmaxPolicy, TabularMDP};
use crate::rng::{derive_seed, derive_seed_path, rng_from_seed, sample_index, sample_without_replacement, standard_normal};
use crate::stats::{Estimate, MeanAccumulator};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetaRlError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid environment: {0}")]
    InvalidEnvironment(String),
    #[error("batch of {batch} exceeds the {tasks} training tasks")]
    BatchLargerThanTaskSet { batch: usize, tasks: usize },
    #[error("need at least 2 resamples, got {0}")]
    InsufficientResamples(usize),
    #[error("need at least 2 replicates, got {0}")]
    InsufficientReplicates(usize),
    #[error("need at least 2 trials, got {0}")]
    InsufficientTrials(usize),
    #[error("every one of {0} super-sample draws missed the target MDP")]
    AllDrawsDegenerate(usize),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Distribution(#[from] InfoError),
    #[error("malformed environment file: {0}")]
    Parse(String),
}

/// Weighted family of MDPs sharing states, actions, discount and horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpEnvironmentFile", into = "MdpEnvironmentFile")]
pub struct MDPEnvironment {
    mdps: Vec<TabularMDP>,
    weights: DiscreteDistribution,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdpEnvironmentFile {
    pub mdps: Vec<TabularMDP>,
    pub weights: Vec<f64>,
}

impl TryFrom<MdpEnvironmentFile> for MDPEnvironment {
    type Error = MetaRlError;
    fn try_from(f: MdpEnvironmentFile) -> Result<Self, MetaRlError> {
        MDPEnvironment::new(f.mdps, DiscreteDistribution::new(f.weights)?)
    }
}

impl From<MDPEnvironment> for MdpEnvironmentFile {
    fn from(e: MDPEnvironment) -> Self {
        MdpEnvironmentFile {
            mdps: e.mdps,
            weights: e.weights.into(),
        }
    }
}

impl MDPEnvironment {
    pub fn new(mdps: Vec<TabularMDP>, weights: DiscreteDistribution) -> Result<Self, MetaRlError> {
        let first = mdps
            .first()
            .ok_or_else(|| MetaRlError::InvalidEnvironment("no MDPs".into()))?;
        if weights.len() != mdps.len() {
            return Err(MetaRlError::InvalidEnvironment(format!(
                "{} weights for {} MDPs",
                weights.len(),
                mdps.len()
            )));
        }
        let shape = |m: &TabularMDP| (m.n_states(), m.n_actions(), m.gamma().to_bits(), m.horizon());
        if mdps.iter().any(|m| shape(m) != shape(first)) {
            return Err(MetaRlError::InvalidEnvironment(
                "MDPs disagree on states, actions, gamma or horizon".into(),
            ));
        }
        Ok(MDPEnvironment { mdps, weights })
    }

    pub fn single(mdp: TabularMDP) -> Self {
        MDPEnvironment {
            mdps: vec![mdp],
            weights: DiscreteDistribution::point_mass(1, 0).expect("one MDP"),
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self, MetaRlError> {
        serde_json::from_str(s).map_err(|e| MetaRlError::Parse(e.to_string()))
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("environment serialization is infallible")
    }

    pub fn mdps(&self) -> &[TabularMDP] {
        &self.mdps
    }

    pub fn weights(&self) -> &DiscreteDistribution {
        &self.weights
    }

    pub fn reweighted(&self, weights: DiscreteDistribution) -> Result<Self, MetaRlError> {
        Self::new(self.mdps.clone(), weights)
    }

    pub fn param_dim(&self) -> usize {
        self.mdps[0].param_dim()
    }

    pub fn gamma(&self) -> f64 {
        self.mdps[0].gamma()
    }

    pub fn return_bound(&self) -> f64 {
        self.mdps[0].return_bound()
    }

    /// Same registry with every discount factor replaced.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self, MetaRlError> {
        let mdps = self.mdps.iter().map(|m| m.with_gamma(gamma)).collect::<Result<Vec<_>, _>>()?;
        Self::new(mdps, self.weights.clone())
    }

    /// `n` i.i.d. registry indices.
    pub fn draw_indices(&self, n: usize, seed: u64) -> Vec<usize> {
        let mut rng = rng_from_seed(seed);
        (0..n).map(|_| sample_index(self.weights.probs(), &mut rng)).collect()
    }

    /// Random environment of `count` MDPs with random weights.
    pub fn random<R: rand::Rng + ?Sized>(
        count: usize,
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        horizon: usize,
        rng: &mut R,
    ) -> Result<Self, MetaRlError> {
        let mdps = (0..count)
            .map(|_| TabularMDP::random(n_states, n_actions, gamma, horizon, rng))
            .collect::<Result<Vec<_>, _>>()?;
        let weights = DiscreteDistribution::new(crate::mdp::random_simplex(count, rng))?;
        Self::new(mdps, weights)
    }
}

/// `n · D(P ‖ Q)` over MDPs matched by equality across the two registries;
/// `+∞` when the test environment misses a training MDP.
pub fn env_kl(trainenv: &MDPEnvironment, testenv: &MDPEnvironment, n: usize) -> f64 {
    let mut p = Vec::new();
    let mut q = Vec::new();
    for (mdp, &w) in trainenv.mdps.iter().zip(trainenv.weights.probs()) {
        if w == 0.0 {
            continue;
        }
        let qw: f64 = testenv
            .mdps
            .iter()
            .zip(testenv.weights.probs())
            .filter(|(m, _)| *m == mdp)
            .map(|(_, &x)| x)
            .sum();
        p.push(w);
        q.push(qw);
    }
    match kl_slices(&p, &q) {
        Ok(kl) => n as f64 * kl,
        Err(_) => f64::INFINITY,
    }
}

/// Step sizes and noise levels of the inner and outer updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub outer_steps: usize,
    pub inner_steps: usize,
    pub batch_size: usize,
    pub outer_rates: Vec<f64>,
    pub outer_noise_sd: Vec<f64>,
    pub inner_rates: Vec<f64>,
    pub inner_noise_sd: Vec<f64>,
}

impl NoiseSchedule {
    #[allow(clippy::too_many_arguments)]
    pub fn constant(
        outer_steps: usize,
        inner_steps: usize,
        batch_size: usize,
        alpha: f64,
        outer_sd: f64,
        beta: f64,
        inner_sd: f64,
    ) -> Result<Self, MetaRlError> {
        let s = NoiseSchedule {
            outer_steps,
            inner_steps,
            batch_size,
            outer_rates: vec![alpha; outer_steps],
            outer_noise_sd: vec![outer_sd; outer_steps],
            inner_rates: vec![beta; inner_steps],
            inner_noise_sd: vec![inner_sd; inner_steps],
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), MetaRlError> {
        if self.outer_rates.len() != self.outer_steps || self.outer_noise_sd.len() != self.outer_steps {
            return Err(MetaRlError::InvalidSchedule("outer lists must have length M".into()));
        }
        if self.inner_rates.len() != self.inner_steps || self.inner_noise_sd.len() != self.inner_steps {
            return Err(MetaRlError::InvalidSchedule("inner lists must have length T".into()));
        }
        if self.outer_rates.iter().chain(&self.inner_rates).any(|r| !(*r >= 0.0)) {
            return Err(MetaRlError::InvalidSchedule("rates must be nonnegative".into()));
        }
        if self.outer_noise_sd.iter().chain(&self.inner_noise_sd).any(|s| !(*s > 0.0)) {
            return Err(MetaRlError::InvalidSchedule("noise sds must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(MetaRlError::InvalidSchedule("batch size must be positive".into()));
        }
        Ok(())
    }

    /// Every noise sd multiplied by `c`.
    pub fn scale_noise(&self, c: f64) -> Result<Self, MetaRlError> {
        let mut s = self.clone();
        s.outer_noise_sd.iter_mut().for_each(|x| *x *= c);
        s.inner_noise_sd.iter_mut().for_each(|x| *x *= c);
        s.validate()?;
        Ok(s)
    }

    /// Every step size multiplied by `c`.
    pub fn scale_rates(&self, c: f64) -> Result<Self, MetaRlError> {
        let mut s = self.clone();
        s.outer_rates.iter_mut().for_each(|x| *x *= c);
        s.inner_rates.iter_mut().for_each(|x| *x *= c);
        s.validate()?;
        Ok(s)
    }
}

fn policy(mdp: &TabularMDP, logits: &[f64]) -> Result<SoftmaxPolicy, MetaRlError> {
    SoftmaxPolicy::for_mdp(mdp, logits).map_err(|e| match e {
        MdpError::DimensionMismatch(m) => MetaRlError::DimensionMismatch(m),
        other => other.into(),
    })
}

/// `φ⁰ = θ`, `φ^{t+1} = φ^t + β_t ĝ(φ^t) + ζ_t`. Returns `φ⁰..φ^T`.
pub fn inner_adapt(
    theta: &[f64],
    mdp: &TabularMDP,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<Vec<f64>>, MetaRlError> {
    let mut rng = rng_from_seed(seed);
    let mut phi = theta.to_vec();
    let mut path = Vec::with_capacity(sched.inner_steps + 1);
    policy(mdp, &phi)?;
    path.push(phi.clone());
    for t in 0..sched.inner_steps {
        let g = sampled_gradient(mdp, &policy(mdp, &phi)?, &mut rng)?;
        let (beta, sd) = (sched.inner_rates[t], sched.inner_noise_sd[t]);
        for (p, gi) in phi.iter_mut().zip(&g) {
            *p += beta * gi + sd * standard_normal(&mut rng);
        }
        path.push(phi.clone());
    }
    Ok(path)
}

/// Adapted parameters `φ^T` only.
pub fn adapt(theta: &[f64], mdp: &TabularMDP, sched: &NoiseSchedule, seed: u64) -> Result<Vec<f64>, MetaRlError> {
    Ok(inner_adapt(theta, mdp, sched, seed)?.pop().expect("path holds φ⁰"))
}

/// First-order meta-gradient: adapt, then one REINFORCE estimate at `φ^T`.
pub fn meta_gradient_estimate(
    theta: &[f64],
    mdp: &TabularMDP,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<f64>, MetaRlError> {
    let phi = adapt(theta, mdp, sched, derive_seed(seed, 0))?;
    let mut rng = rng_from_seed(derive_seed(seed, 1));
    Ok(sampled_gradient(mdp, &policy(mdp, &phi)?, &mut rng)?)
}

/// Per-task inner paths `φ⁰..φ^T` adapted from `θ^m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationSnapshot {
    pub outer_step: usize,
    /// `paths[i][t]` is `φ_i^t`.
    pub paths: Vec<Vec<Vec<f64>>>,
}

impl AdaptationSnapshot {
    /// `φ^t_{1:n}` stacked into one vector.
    pub fn stacked(&self, t: usize) -> Vec<f64> {
        self.paths.iter().flat_map(|p| p[t].iter().copied()).collect()
    }

    pub fn finals(&self) -> Vec<Vec<f64>> {
        self.paths.iter().map(|p| p.last().expect("non-empty path").clone()).collect()
    }
}

/// Everything recorded by one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// `θ⁰..θ^M`.
    pub theta_trace: Vec<Vec<f64>>,
    /// One snapshot per `θ^m`, `m = 0..=M`; the last one holds the output `φ_{1:n}`.
    pub adaptation_snapshots: Vec<AdaptationSnapshot>,
    /// Batch chosen at each outer step.
    pub batches: Vec<Vec<usize>>,
    pub seed: u64,
}

impl TrainLog {
    pub fn final_theta(&self) -> &[f64] {
        self.theta_trace.last().expect("trace holds θ⁰")
    }

    /// Adapted parameters `φ^T_{1:n}` at `θ^M`.
    pub fn final_phis(&self) -> Vec<Vec<f64>> {
        self.adaptation_snapshots.last().expect("snapshot at θ^M").finals()
    }
}

fn check_tasks(tasks: &[TabularMDP], sched: &NoiseSchedule) -> Result<(), MetaRlError> {
    sched.validate()?;
    let first = tasks
        .first()
        .ok_or_else(|| MetaRlError::InvalidEnvironment("no training tasks".into()))?;
    if sched.batch_size > tasks.len() {
        return Err(MetaRlError::BatchLargerThanTaskSet {
            batch: sched.batch_size,
            tasks: tasks.len(),
        });
    }
    if tasks
        .iter()
        .any(|m| m.n_states() != first.n_states() || m.n_actions() != first.n_actions())
    {
        return Err(MetaRlError::DimensionMismatch("training tasks differ in shape".into()));
    }
    Ok(())
}

/// Run `M` outer steps from `θ⁰ = 0` on the drawn tasks.
pub fn meta_train(tasks: &[TabularMDP], sched: &NoiseSchedule, seed: u64) -> Result<TrainLog, MetaRlError> {
    check_tasks(tasks, sched)?;
    let d = tasks[0].param_dim();
    let n = tasks.len();
    let mut theta = vec![0.0; d];
    let mut log = TrainLog {
        theta_trace: vec![theta.clone()],
        adaptation_snapshots: Vec::with_capacity(sched.outer_steps + 1),
        batches: Vec::with_capacity(sched.outer_steps),
        seed,
    };
    for m in 0..=sched.outer_steps {
        let paths = tasks
            .iter()
            .enumerate()
            .map(|(i, mdp)| inner_adapt(&theta, mdp, sched, derive_seed_path(seed, &[m as u64, i as u64, 0])))
            .collect::<Result<Vec<_>, _>>()?;
        let snapshot = AdaptationSnapshot { outer_step: m, paths };
        if m == sched.outer_steps {
            log.adaptation_snapshots.push(snapshot);
            break;
        }
        let step_seed = derive_seed_path(seed, &[m as u64, u64::MAX]);
        let mut rng = rng_from_seed(step_seed);
        let batch = sample_without_replacement(n, sched.batch_size, &mut rng);
        let mut direction = vec![0.0; d];
        for &i in &batch {
            let phi = snapshot.paths[i].last().expect("non-empty path");
            let mut grad_rng = rng_from_seed(derive_seed_path(seed, &[m as u64, i as u64, 1]));
            let g = sampled_gradient(&tasks[i], &policy(&tasks[i], phi)?, &mut grad_rng)?;
            for (x, gi) in direction.iter_mut().zip(&g) {
                *x += gi / sched.batch_size as f64;
            }
        }
        let (alpha, sd) = (sched.outer_rates[m], sched.outer_noise_sd[m]);
        for (t, g) in theta.iter_mut().zip(&direction) {
            *t += alpha * g + sd * standard_normal(&mut rng);
        }
        log.adaptation_snapshots.push(snapshot);
        log.batches.push(batch);
        log.theta_trace.push(theta.clone());
    }
    Ok(log)
}

fn replicate_mean(
    theta: &[f64],
    mdp: &TabularMDP,
    sched: &NoiseSchedule,
    replicates: usize,
    seed: u64,
) -> Result<Estimate, MetaRlError> {
    let mut acc = MeanAccumulator::default();
    for k in 0..replicates {
        let phi = adapt(theta, mdp, sched, derive_seed(seed, k as u64))?;
        acc.push(exact_return(mdp, &policy(mdp, &phi)?)?);
    }
    Ok(acc.estimate())
}

/// `(1/n) Σ_i E_{φ|θ,ℳ_i} J(π_φ, ℳ_i)`; the expectation over `φ` uses
/// `replicates` adaptations, the return is exact.
pub fn empirical_meta_objective(
    theta: &[f64],
    mdps: &[TabularMDP],
    sched: &NoiseSchedule,
    replicates: usize,
    seed: u64,
) -> Result<Estimate, MetaRlError> {
    if replicates < 2 {
        return Err(MetaRlError::InsufficientReplicates(replicates));
    }
    let n = mdps.len() as f64;
    let mut mean = 0.0;
    let mut var = 0.0;
    for (i, mdp) in mdps.iter().enumerate() {
        let e = replicate_mean(theta, mdp, sched, replicates, derive_seed(seed, i as u64))?;
        mean += e.mean / n;
        var += (e.se / n).powi(2);
    }
    Ok(Estimate {
        mean,
        se: var.sqrt(),
        count: replicates,
    })
}

/// `Σ_j w_j E_{φ|θ,ℳ_j} J(π_φ, ℳ_j)` over the environment registry.
pub fn population_meta_objective(
    theta: &[f64],
    env: &MDPEnvironment,
    sched: &NoiseSchedule,
    replicates: usize,
    seed: u64,
) -> Result<Estimate, MetaRlError> {
    if replicates < 2 {
        return Err(MetaRlError::InsufficientReplicates(replicates));
    }
    let mut mean = 0.0;
    let mut var = 0.0;
    for (j, (mdp, &w)) in env.mdps.iter().zip(env.weights.probs()).enumerate() {
        if w == 0.0 {
            continue;
        }
        let e = replicate_mean(theta, mdp, sched, replicates, derive_seed(seed, j as u64))?;
        mean += w * e.mean;
        var += (w * e.se).powi(2);
    }
    Ok(Estimate {
        mean,
        se: var.sqrt(),
        count: replicates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::info::DiscreteDistribution;

    fn bandit() -> TabularMDP {
        TabularMDP::new(
            1,
            2,
            vec![1.0, 1.0],
            vec![1.0, 0.0],
            DiscreteDistribution::point_mass(1, 0).unwrap(),
            0.0,
            0,
        )
        .unwrap()
    }

    fn zero_reward(mdp: &TabularMDP) -> TabularMDP {
        mdp.with_reward(vec![0.0; mdp.param_dim()]).unwrap()
    }

    #[test]
    fn schedule_validation() {
        assert!(NoiseSchedule::constant(2, 2, 1, 0.1, 0.0, 0.1, 0.1).is_err());
        assert!(NoiseSchedule::constant(2, 2, 0, 0.1, 0.1, 0.1, 0.1).is_err());
        let mut s = NoiseSchedule::constant(2, 2, 1, 0.1, 0.1, 0.1, 0.1).unwrap();
        s.inner_rates.pop();
        assert!(s.validate().is_err());
    }

    #[test]
    fn no_update_limit() {
        let mut rng = rng_from_seed(1);
        let mdp = TabularMDP::random(2, 2, 0.9, 3, &mut rng).unwrap();
        let sched = NoiseSchedule::constant(2, 4, 1, 0.0, 1e-300, 0.0, 1e-300).unwrap();
        let theta = vec![0.3, -0.2, 1.0, 0.5];
        assert_eq!(adapt(&theta, &mdp, &sched, 5).unwrap(), theta);
        let log = meta_train(&[mdp.clone(), mdp], &sched, 3).unwrap();
        assert!(log.final_theta().iter().all(|x| x.abs() < 1e-200));
        assert_eq!(log.theta_trace.len(), 3);
        assert_eq!(log.adaptation_snapshots.len(), 3);
    }

    #[test]
    fn zero_reward_inner_step_is_pure_noise() {
        let mut rng = rng_from_seed(2);
        let mdp = zero_reward(&TabularMDP::random(2, 2, 0.5, 2, &mut rng).unwrap());
        let sched = NoiseSchedule::constant(1, 1, 1, 0.0, 1.0, 0.7, 0.3).unwrap();
        let mut acc = vec![MeanAccumulator::default(); 4];
        for seed in 0..10_000 {
            let phi = adapt(&[0.0; 4], &mdp, &sched, seed).unwrap();
            phi.iter().zip(acc.iter_mut()).for_each(|(x, a)| a.push(*x));
        }
        for a in &acc {
            assert!((a.variance() / 0.09 - 1.0).abs() < 0.05, "{}", a.variance());
        }
    }

    #[test]
    fn bandit_adaptation_converges() {
        let sched = NoiseSchedule::constant(1, 50, 1, 0.0, 1.0, 0.5, 1e-6).unwrap();
        let mdp = bandit();
        let mut acc = MeanAccumulator::default();
        for seed in 0..100 {
            let phi = adapt(&[0.0, 0.0], &mdp, &sched, seed).unwrap();
            acc.push(SoftmaxPolicy::for_mdp(&mdp, &phi).unwrap().probs(0)[0]);
        }
        assert!(acc.mean() > 0.9, "{}", acc.mean());
    }

    #[test]
    fn meta_gradient_without_inner_steps_is_policy_gradient() {
        let mut rng = rng_from_seed(3);
        let mdp = TabularMDP::random(2, 2, 0.8, 2, &mut rng).unwrap();
        let sched = NoiseSchedule::constant(1, 0, 1, 0.0, 1.0, 0.0, 1.0).unwrap();
        let theta = vec![0.4, -0.3, 0.1, 0.2];
        let exact = crate::mdp::policy_gradient_dp(&mdp, &SoftmaxPolicy::for_mdp(&mdp, &theta).unwrap()).unwrap();
        let mut acc = vec![MeanAccumulator::default(); 4];
        for seed in 0..100_000 {
            let g = meta_gradient_estimate(&theta, &mdp, &sched, seed).unwrap();
            g.iter().zip(acc.iter_mut()).for_each(|(x, a)| a.push(*x));
        }
        for (a, e) in acc.iter().zip(&exact) {
            let est = a.estimate();
            assert!((est.mean - e).abs() <= 3.0 * est.se, "{} vs {e}", est.mean);
        }
    }

    #[test]
    fn zero_reward_meta_gradient_vanishes() {
        let mut rng = rng_from_seed(4);
        let mdp = zero_reward(&TabularMDP::random(2, 2, 0.8, 2, &mut rng).unwrap());
        let sched = NoiseSchedule::constant(1, 3, 1, 0.1, 0.1, 0.5, 0.2).unwrap();
        assert!(meta_gradient_estimate(&[0.0; 4], &mdp, &sched, 9)
            .unwrap()
            .iter()
            .all(|g| *g == 0.0));
    }

    #[test]
    fn bandit_meta_gradient_sign() {
        let sched = NoiseSchedule::constant(1, 10, 1, 0.0, 1.0, 0.5, 0.01).unwrap();
        let mdp = bandit();
        let positive = (0..1000)
            .filter(|&s| meta_gradient_estimate(&[0.0, 0.0], &mdp, &sched, s).unwrap()[0] >= 0.0)
            .count();
        assert!(positive >= 950, "{positive}");
    }

    #[test]
    fn meta_train_averages_over_identical_tasks() {
        let mut rng = rng_from_seed(5);
        let mdp = TabularMDP::random(2, 2, 0.8, 2, &mut rng).unwrap();
        let sched = NoiseSchedule::constant(1, 1, 3, 1.0, 1e-12, 0.5, 0.1).unwrap();
        let tasks = vec![mdp.clone(); 3];
        let mut acc = vec![MeanAccumulator::default(); 4];
        let mut single = vec![MeanAccumulator::default(); 4];
        for seed in 0..20_000 {
            let log = meta_train(&tasks, &sched, seed).unwrap();
            log.final_theta().iter().zip(acc.iter_mut()).for_each(|(x, a)| a.push(*x));
            let g = meta_gradient_estimate(&[0.0; 4], &mdp, &sched, seed).unwrap();
            g.iter().zip(single.iter_mut()).for_each(|(x, a)| a.push(*x));
        }
        for (a, s) in acc.iter().zip(&single) {
            let (a, s) = (a.estimate(), s.estimate());
            assert!((a.mean - s.mean).abs() <= 3.0 * a.se.hypot(s.se));
        }
    }

    #[test]
    fn meta_train_is_deterministic_and_checks_batch() {
        let mut rng = rng_from_seed(6);
        let env = MDPEnvironment::random(2, 2, 2, 0.7, 2, &mut rng).unwrap();
        let tasks = env.mdps().to_vec();
        let sched = NoiseSchedule::constant(3, 2, 2, 0.3, 0.1, 0.3, 0.1).unwrap();
        let a = meta_train(&tasks, &sched, 11).unwrap();
        let b = meta_train(&tasks, &sched, 11).unwrap();
        assert_eq!(a, b);
        let big = NoiseSchedule::constant(3, 2, 3, 0.3, 0.1, 0.3, 0.1).unwrap();
        assert_eq!(
            meta_train(&tasks, &big, 1).unwrap_err(),
            MetaRlError::BatchLargerThanTaskSet { batch: 3, tasks: 2 }
        );
    }

    #[test]
    fn objectives_limits_and_linearity() {
        let mut rng = rng_from_seed(7);
        let env = MDPEnvironment::random(2, 2, 2, 0.7, 2, &mut rng).unwrap();
        let still = NoiseSchedule::constant(1, 2, 1, 0.0, 1.0, 0.0, 1e-300).unwrap();
        let theta = vec![0.2, -0.1, 0.0, 0.3];
        let e = empirical_meta_objective(&theta, env.mdps(), &still, 4, 1).unwrap();
        let direct: f64 = env
            .mdps()
            .iter()
            .map(|m| exact_return(m, &SoftmaxPolicy::for_mdp(m, &theta).unwrap()).unwrap())
            .sum::<f64>()
            / 2.0;
        assert!((e.mean - direct).abs() < 1e-12);

        let zero: Vec<TabularMDP> = env.mdps().iter().map(zero_reward).collect();
        let sched = NoiseSchedule::constant(1, 2, 1, 0.0, 1.0, 0.5, 0.1).unwrap();
        assert_eq!(empirical_meta_objective(&theta, &zero, &sched, 4, 1).unwrap().mean, 0.0);

        let uniform = env.reweighted(DiscreteDistribution::uniform(2).unwrap()).unwrap();
        let pop = population_meta_objective(&theta, &uniform, &still, 2, 3).unwrap();
        assert!((pop.mean - direct).abs() < 1e-12);
        assert!(empirical_meta_objective(&theta, env.mdps(), &still, 1, 1).is_err());
    }

    #[test]
    fn objective_se_scales_with_replicates() {
        let mut rng = rng_from_seed(8);
        let mdp = TabularMDP::random(2, 2, 0.7, 2, &mut rng).unwrap();
        let sched = NoiseSchedule::constant(1, 2, 1, 0.0, 1.0, 0.5, 0.5).unwrap();
        let se: Vec<f64> = [16, 64, 256]
            .iter()
            .map(|&k| empirical_meta_objective(&[0.0; 4], std::slice::from_ref(&mdp), &sched, k, 2).unwrap().se)
            .collect();
        assert!(se[0] > se[1] && se[1] > se[2]);
        assert!((se[0] / se[2] / 4.0 - 1.0).abs() < 0.35, "{se:?}");
    }

    #[test]
    fn env_kl_examples() {
        let mut rng = rng_from_seed(9);
        let env = MDPEnvironment::random(2, 2, 2, 0.7, 2, &mut rng).unwrap();
        let a = env.reweighted(DiscreteDistribution::new(vec![0.75, 0.25]).unwrap()).unwrap();
        let b = env.reweighted(DiscreteDistribution::new(vec![0.25, 0.75]).unwrap()).unwrap();
        assert_eq!(env_kl(&a, &a, 3), 0.0);
        assert!((env_kl(&a, &b, 2) - 1.0986122886681098).abs() < 1e-12);
        let only_first = MDPEnvironment::single(env.mdps()[0].clone());
        assert_eq!(env_kl(&a, &only_first, 2), f64::INFINITY);
        assert_eq!(env_kl(&only_first, &a, 2), 2.0 * (1.0f64 / 0.75).ln());
    }

    #[test]
    fn environment_json_round_trip() {
        let mut rng = rng_from_seed(10);
        let env = MDPEnvironment::random(3, 2, 2, 0.7, 2, &mut rng).unwrap();
        assert_eq!(MDPEnvironment::from_json_str(&env.to_json_string()).unwrap(), env);
    }
}
