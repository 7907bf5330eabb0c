//! Offline meta-RL on episodic tabular MDPs.
//!
//! Datasets hold `(s, a, r, s′, s″, h)` tuples drawn from a behavior
//! distribution over `(s, a, h)` with two independent next states, which makes
//! the double-sampling loss an unbiased estimate of the behavior-weighted
//! Bellman error. Steps are indexed `h = 0..H` internally.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::info::{kl_slices, log_det_ratio_term, plugin_mi_labels, sample_covariance, DiscreteDistribution, InfoError};
use crate::meta_rl::{quantized_label, tuple_label, QUANTIZATION_STEP};
use crate::mdp::random_simplex;
use crate::rng::{derive_seed, rng_from_seed, sample_index, standard_normal};
use crate::stats::{Estimate, MeanAccumulator};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OfflineError {
    #[error("invalid MDP: {0}")]
    Invalid(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("behavior misses (s={s}, a={a}, h={h}) visited by the evaluated policy")]
    CoverageViolation { s: usize, a: usize, h: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("need at least {need}, got {got} {what}")]
    TooFew { what: &'static str, need: usize, got: usize },
    #[error(transparent)]
    Distribution(#[from] InfoError),
    #[error("malformed environment file: {0}")]
    Parse(String),
}

/// Undiscounted finite-horizon MDP with per-step kernels `P_h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EpisodicFile", into = "EpisodicFile")]
pub struct EpisodicMDP {
    n_states: usize,
    n_actions: usize,
    horizon: usize,
    /// `P[h][s][a][s']`, flattened.
    transition: Vec<f64>,
    reward: Vec<f64>,
    initial: DiscreteDistribution,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodicFile {
    pub episodic: bool,
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub transition: Vec<Vec<Vec<Vec<f64>>>>,
    pub reward: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
}

impl TryFrom<EpisodicFile> for EpisodicMDP {
    type Error = OfflineError;
    fn try_from(f: EpisodicFile) -> Result<Self, OfflineError> {
        if !f.episodic {
            return Err(OfflineError::Parse("expected \"episodic\": true".into()));
        }
        let shape_ok = f.transition.len() == f.horizon
            && f.transition.iter().all(|l| {
                l.len() == f.n_states && l.iter().all(|r| r.len() == f.n_actions && r.iter().all(|p| p.len() == f.n_states))
            })
            && f.reward.len() == f.n_states
            && f.reward.iter().all(|r| r.len() == f.n_actions);
        if !shape_ok {
            return Err(OfflineError::DimensionMismatch(
                "transition must be [H][S][A][S] and reward [S][A]".into(),
            ));
        }
        EpisodicMDP::new(
            f.n_states,
            f.n_actions,
            f.horizon,
            f.transition.into_iter().flatten().flatten().flatten().collect(),
            f.reward.into_iter().flatten().collect(),
            DiscreteDistribution::new(f.initial)?,
        )
    }
}

impl From<EpisodicMDP> for EpisodicFile {
    fn from(m: EpisodicMDP) -> Self {
        let (ns, na) = (m.n_states, m.n_actions);
        EpisodicFile {
            episodic: true,
            n_states: ns,
            n_actions: na,
            horizon: m.horizon,
            transition: m
                .transition
                .chunks(ns * na * ns)
                .map(|l| l.chunks(na * ns).map(|r| r.chunks(ns).map(<[f64]>::to_vec).collect()).collect())
                .collect(),
            reward: m.reward.chunks(na).map(<[f64]>::to_vec).collect(),
            initial: m.initial.into(),
        }
    }
}

impl EpisodicMDP {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        horizon: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        initial: DiscreteDistribution,
    ) -> Result<Self, OfflineError> {
        if n_states == 0 || n_actions == 0 || horizon == 0 {
            return Err(OfflineError::Invalid("states, actions and horizon must be positive".into()));
        }
        if transition.len() != horizon * n_states * n_actions * n_states
            || reward.len() != n_states * n_actions
            || initial.len() != n_states
        {
            return Err(OfflineError::DimensionMismatch("table sizes disagree with S, A, H".into()));
        }
        for row in transition.chunks(n_states) {
            DiscreteDistribution::new(row.to_vec())?;
        }
        if reward.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(OfflineError::Invalid("rewards must lie in [0, 1]".into()));
        }
        Ok(EpisodicMDP {
            n_states,
            n_actions,
            horizon,
            transition,
            reward,
            initial,
        })
    }

    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, horizon: usize, rng: &mut R) -> Result<Self, OfflineError> {
        let mut transition = Vec::with_capacity(horizon * n_states * n_actions * n_states);
        for _ in 0..horizon * n_states * n_actions {
            transition.extend(random_simplex(n_states, rng));
        }
        let reward = (0..n_states * n_actions).map(|_| rng.random::<f64>()).collect();
        let initial = DiscreteDistribution::new(random_simplex(n_states, rng))?;
        Self::new(n_states, n_actions, horizon, transition, reward, initial)
    }

    pub fn from_json_str(s: &str) -> Result<Self, OfflineError> {
        serde_json::from_str(s).map_err(|e| OfflineError::Parse(e.to_string()))
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("MDP serialization is infallible")
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn initial(&self) -> &DiscreteDistribution {
        &self.initial
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn transition_row(&self, h: usize, s: usize, a: usize) -> &[f64] {
        let ns = self.n_states;
        let start = ((h * ns + s) * self.n_actions + a) * ns;
        &self.transition[start..start + ns]
    }

    /// Number of `(s, a, h)` cells.
    pub fn cells(&self) -> usize {
        self.horizon * self.n_states * self.n_actions
    }

    pub fn cell(&self, s: usize, a: usize, h: usize) -> usize {
        (h * self.n_states + s) * self.n_actions + a
    }

    /// Inverse of [`cell`](Self::cell).
    pub fn cell_coords(&self, idx: usize) -> (usize, usize, usize) {
        let a = idx % self.n_actions;
        let s = (idx / self.n_actions) % self.n_states;
        (s, a, idx / (self.n_actions * self.n_states))
    }
}

/// `Q_0..Q_{H−1}` with `Q_H ≡ 0`, flattened by [`EpisodicMDP::cell`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QStack {
    n_states: usize,
    n_actions: usize,
    horizon: usize,
    values: Vec<f64>,
}

impl QStack {
    pub fn zeros(mdp: &EpisodicMDP) -> Self {
        QStack {
            n_states: mdp.n_states,
            n_actions: mdp.n_actions,
            horizon: mdp.horizon,
            values: vec![0.0; mdp.cells()],
        }
    }

    /// Values are clipped to `[0, H]`.
    pub fn from_values(mdp: &EpisodicMDP, values: Vec<f64>) -> Result<Self, OfflineError> {
        if values.len() != mdp.cells() {
            return Err(OfflineError::DimensionMismatch(format!(
                "{} values for {} cells",
                values.len(),
                mdp.cells()
            )));
        }
        let h = mdp.horizon as f64;
        Ok(QStack {
            n_states: mdp.n_states,
            n_actions: mdp.n_actions,
            horizon: mdp.horizon,
            values: values.into_iter().map(|v| v.clamp(0.0, h)).collect(),
        })
    }

    pub fn random<R: Rng + ?Sized>(mdp: &EpisodicMDP, rng: &mut R) -> Self {
        let h = mdp.horizon as f64;
        let values = (0..mdp.cells()).map(|_| rng.random_range(0.0..=h)).collect();
        QStack::from_values(mdp, values).expect("sized to the MDP")
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn get(&self, h: usize, s: usize, a: usize) -> f64 {
        self.values[(h * self.n_states + s) * self.n_actions + a]
    }

    /// Step-`h` table `Q_h[s][a]`; zeros at `h = H`.
    pub fn table(&self, h: usize) -> Vec<f64> {
        let w = self.n_states * self.n_actions;
        if h >= self.horizon {
            vec![0.0; w]
        } else {
            self.values[h * w..(h + 1) * w].to_vec()
        }
    }

    /// `V_h(s) = max_a Q_h(s, a)`, zero at `h = H`.
    pub fn value(&self, h: usize, s: usize) -> f64 {
        if h >= self.horizon {
            return 0.0;
        }
        (0..self.n_actions).map(|a| self.get(h, s, a)).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Greedy plan `argmax_a Q_h(s, a)`, lowest index on ties.
    pub fn greedy_plan(&self) -> Vec<Vec<usize>> {
        (0..self.horizon)
            .map(|h| {
                (0..self.n_states)
                    .map(|s| {
                        (0..self.n_actions).fold(0, |best, a| if self.get(h, s, a) > self.get(h, s, best) { a } else { best })
                    })
                    .collect()
            })
            .collect()
    }

    fn check(&self, mdp: &EpisodicMDP) -> Result<(), OfflineError> {
        if (self.n_states, self.n_actions, self.horizon) != (mdp.n_states, mdp.n_actions, mdp.horizon) {
            return Err(OfflineError::DimensionMismatch("Q-stack shape differs from the MDP".into()));
        }
        Ok(())
    }
}

fn max_row(table: &[f64], s: usize, na: usize) -> f64 {
    table[s * na..(s + 1) * na].iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `(T*_h Q)(s, a) = r(s, a) + Σ_{s′} P_h(s′|s, a) max_{a′} Q(s′, a′)`.
pub fn bellman_apply(mdp: &EpisodicMDP, q_next: &[f64], h: usize) -> Vec<f64> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let v: Vec<f64> = (0..ns).map(|s| max_row(q_next, s, na)).collect();
    let mut out = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            let cont: f64 = mdp.transition_row(h, s, a).iter().zip(&v).map(|(p, x)| p * x).sum();
            out[s * na + a] = mdp.reward(s, a) + cont;
        }
    }
    out
}

/// Backward induction from `Q_H ≡ 0`.
pub fn optimal_q(mdp: &EpisodicMDP) -> QStack {
    let w = mdp.n_states * mdp.n_actions;
    let mut values = vec![0.0; mdp.cells()];
    let mut next = vec![0.0; w];
    for h in (0..mdp.horizon).rev() {
        next = bellman_apply(mdp, &next, h);
        values[h * w..(h + 1) * w].copy_from_slice(&next);
    }
    QStack::from_values(mdp, values).expect("optimal values lie in [0, H]")
}

/// `V*_0` averaged over the initial distribution.
pub fn optimal_value(mdp: &EpisodicMDP) -> f64 {
    let q = optimal_q(mdp);
    (0..mdp.n_states).map(|s| mdp.initial.prob(s) * q.value(0, s)).sum()
}

/// Value of a deterministic plan from the initial distribution.
pub fn plan_value(mdp: &EpisodicMDP, plan: &[Vec<usize>]) -> f64 {
    let ns = mdp.n_states;
    let mut v = vec![0.0; ns];
    for h in (0..mdp.horizon).rev() {
        v = (0..ns)
            .map(|s| {
                let a = plan[h][s];
                mdp.reward(s, a) + mdp.transition_row(h, s, a).iter().zip(&v).map(|(p, x)| p * x).sum::<f64>()
            })
            .collect();
    }
    mdp.initial.probs().iter().zip(&v).map(|(p, x)| p * x).sum()
}

/// `d_h(s, a)` of a deterministic plan, flattened by cell; each step sums to 1.
pub fn plan_occupancy(mdp: &EpisodicMDP, plan: &[Vec<usize>]) -> Vec<f64> {
    let ns = mdp.n_states;
    let mut occ = vec![0.0; mdp.cells()];
    let mut d = mdp.initial.probs().to_vec();
    for h in 0..mdp.horizon {
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            let a = plan[h][s];
            occ[mdp.cell(s, a, h)] += d[s];
            for (n, p) in next.iter_mut().zip(mdp.transition_row(h, s, a)) {
                *n += d[s] * p;
            }
        }
        d = next;
    }
    occ
}

/// `(1/H) Σ_{s,a,h} w(s,a,h) (Q_h(s,a) − (T*_h Q_{h+1})(s,a))²`.
pub fn true_bellman_error(q: &QStack, mdp: &EpisodicMDP, weights: &DiscreteDistribution) -> Result<f64, OfflineError> {
    q.check(mdp)?;
    if weights.len() != mdp.cells() {
        return Err(OfflineError::DimensionMismatch("weights must cover every (s, a, h)".into()));
    }
    let w = mdp.n_states * mdp.n_actions;
    let mut total = 0.0;
    for h in 0..mdp.horizon {
        let target = bellman_apply(mdp, &q.table(h + 1), h);
        for (i, t) in target.iter().enumerate() {
            let res = q.values[h * w + i] - t;
            total += weights.prob(h * w + i) * res * res;
        }
    }
    Ok(total / mdp.horizon as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub next: usize,
    pub next_alt: usize,
    pub h: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineDataset {
    pub transitions: Vec<Transition>,
    pub behavior: DiscreteDistribution,
}

impl OfflineDataset {
    /// Same tuples with `s′` and `s″` exchanged.
    pub fn swapped(&self) -> Self {
        let mut d = self.clone();
        for t in &mut d.transitions {
            std::mem::swap(&mut t.next, &mut t.next_alt);
        }
        d
    }
}

/// `m` i.i.d. tuples: `(s, a, h) ~ behavior`, two independent next states.
pub fn collect_offline(mdp: &EpisodicMDP, behavior: &DiscreteDistribution, m: usize, seed: u64) -> OfflineDataset {
    let mut rng = rng_from_seed(seed);
    let transitions = (0..m)
        .map(|_| {
            let (s, a, h) = mdp.cell_coords(sample_index(behavior.probs(), &mut rng));
            let row = mdp.transition_row(h, s, a);
            Transition {
                s,
                a,
                r: mdp.reward(s, a),
                next: sample_index(row, &mut rng),
                next_alt: sample_index(row, &mut rng),
                h,
            }
        })
        .collect();
    OfflineDataset {
        transitions,
        behavior: behavior.clone(),
    }
}

/// Double-sampling loss
/// `(1/mH) Σ [(Q_h(s,a) − r − V_{h+1}(s′))² − ½ (V_{h+1}(s′) − V_{h+1}(s″))²]`.
pub fn empirical_bellman_loss(q: &QStack, data: &OfflineDataset) -> Result<f64, OfflineError> {
    if data.transitions.is_empty() {
        return Err(OfflineError::EmptyDataset);
    }
    let total: f64 = data
        .transitions
        .iter()
        .map(|t| {
            let v1 = q.value(t.h + 1, t.next);
            let v2 = q.value(t.h + 1, t.next_alt);
            let td = q.get(t.h, t.s, t.a) - t.r - v1;
            td * td - 0.5 * (v1 - v2) * (v1 - v2)
        })
        .sum();
    Ok(total / (data.transitions.len() * q.horizon) as f64)
}

/// Backward per-cell ridge fit: `(Σ y + λ θ) / (count + λ)` with targets
/// `y = r + V_{h+1}(s′)` from the already fitted next step, clipped to `[0, H]`.
/// Cells without data and without pull keep `θ`.
pub fn ridge_fit(mdp: &EpisodicMDP, theta: &QStack, data: &OfflineDataset, pull: f64) -> Result<QStack, OfflineError> {
    theta.check(mdp)?;
    let mut by_step: Vec<Vec<&Transition>> = vec![Vec::new(); mdp.horizon];
    for t in &data.transitions {
        by_step[t.h].push(t);
    }
    let w = mdp.n_states * mdp.n_actions;
    let hmax = mdp.horizon as f64;
    let mut fit = theta.clone();
    for h in (0..mdp.horizon).rev() {
        let mut sum = vec![0.0; w];
        let mut count = vec![0.0; w];
        for t in &by_step[h] {
            let i = t.s * mdp.n_actions + t.a;
            sum[i] += t.r + fit.value(h + 1, t.next);
            count[i] += 1.0;
        }
        for i in 0..w {
            let prior = theta.values[h * w + i];
            let v = if pull.is_infinite() || (count[i] == 0.0 && pull == 0.0) {
                prior
            } else {
                (sum[i] + pull * prior) / (count[i] + pull)
            };
            fit.values[h * w + i] = v.clamp(0.0, hmax);
        }
    }
    Ok(fit)
}

/// Plain fitted-Q: per-cell mean targets, uncovered cells zero.
pub fn fitted_q(mdp: &EpisodicMDP, data: &OfflineDataset) -> Result<QStack, OfflineError> {
    ridge_fit(mdp, &QStack::zeros(mdp), data, 0.0)
}

/// Ridge fit toward `θ`, then Gaussian noise of sd `temperature` on every
/// cell, clipped to `[0, H]`.
pub fn fit_q_gibbs(
    mdp: &EpisodicMDP,
    theta: &QStack,
    data: &OfflineDataset,
    temperature: f64,
    pull: f64,
    seed: u64,
) -> Result<QStack, OfflineError> {
    if !(temperature > 0.0) {
        return Err(OfflineError::Invalid("temperature must be positive".into()));
    }
    let mean = ridge_fit(mdp, theta, data, pull)?;
    let mut rng = rng_from_seed(seed);
    let values = mean.values.iter().map(|v| v + temperature * standard_normal(&mut rng)).collect();
    QStack::from_values(mdp, values)
}

/// `sqrt(64 H² (MI + KL) / (n m))`.
pub fn offline_bound(mi_estimate: f64, kl_term: f64, horizon: usize, n: usize, m: usize) -> f64 {
    let h = horizon as f64;
    (64.0 * h * h * (mi_estimate + kl_term) / (n * m) as f64).sqrt()
}

/// `max_{s,a,h} d^π_h(s,a) / behavior(s,a,h)` for a deterministic plan.
pub fn concentrability(mdp: &EpisodicMDP, behavior: &DiscreteDistribution, plan: &[Vec<usize>]) -> Result<f64, OfflineError> {
    if behavior.len() != mdp.cells() {
        return Err(OfflineError::DimensionMismatch("behavior must cover every (s, a, h)".into()));
    }
    let occ = plan_occupancy(mdp, plan);
    let mut c: f64 = 0.0;
    for (i, (&d, &b)) in occ.iter().zip(behavior.probs()).enumerate() {
        if d > 0.0 {
            if b == 0.0 {
                let (s, a, h) = mdp.cell_coords(i);
                return Err(OfflineError::CoverageViolation { s, a, h });
            }
            c = c.max(d / b);
        }
    }
    Ok(c)
}

/// An MDP with the behavior distribution its datasets are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineTask {
    pub mdp: EpisodicMDP,
    pub behavior: DiscreteDistribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineEnvironment {
    pub tasks: Vec<OfflineTask>,
    pub weights: DiscreteDistribution,
}

impl OfflineEnvironment {
    pub fn new(tasks: Vec<OfflineTask>, weights: DiscreteDistribution) -> Result<Self, OfflineError> {
        let first = tasks.first().ok_or_else(|| OfflineError::Invalid("no tasks".into()))?;
        let shape = |t: &OfflineTask| (t.mdp.n_states, t.mdp.n_actions, t.mdp.horizon);
        if weights.len() != tasks.len()
            || tasks.iter().any(|t| shape(t) != shape(first) || t.behavior.len() != t.mdp.cells())
        {
            return Err(OfflineError::DimensionMismatch(
                "tasks, behaviors and weights must agree in shape".into(),
            ));
        }
        Ok(OfflineEnvironment { tasks, weights })
    }

    pub fn from_json_str(s: &str) -> Result<Self, OfflineError> {
        let env: OfflineEnvironment = serde_json::from_str(s).map_err(|e| OfflineError::Parse(e.to_string()))?;
        Self::new(env.tasks, env.weights)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("environment serialization is infallible")
    }

    pub fn horizon(&self) -> usize {
        self.tasks[0].mdp.horizon
    }

    pub fn reweighted(&self, weights: DiscreteDistribution) -> Result<Self, OfflineError> {
        Self::new(self.tasks.clone(), weights)
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_index(self.weights.probs(), rng)
    }

    /// Random environment of `count` tasks; behaviors mix a random
    /// distribution with uniform so every cell is covered.
    pub fn random<R: Rng + ?Sized>(
        count: usize,
        n_states: usize,
        n_actions: usize,
        horizon: usize,
        rng: &mut R,
    ) -> Result<Self, OfflineError> {
        let tasks = (0..count)
            .map(|_| {
                let mdp = EpisodicMDP::random(n_states, n_actions, horizon, rng)?;
                let k = mdp.cells();
                let mixed = random_simplex(k, rng).into_iter().map(|p| 0.5 * p + 0.5 / k as f64).collect();
                Ok(OfflineTask {
                    behavior: DiscreteDistribution::from_weights(mixed)?,
                    mdp,
                })
            })
            .collect::<Result<Vec<_>, OfflineError>>()?;
        Self::new(tasks, DiscreteDistribution::new(random_simplex(count, rng))?)
    }
}

/// `n · D(P ‖ Q)` on the task weights; by the chain rule this dominates the
/// divergence between the induced dataset laws.
pub fn offline_kl(trainenv: &OfflineEnvironment, testenv: &OfflineEnvironment, n: usize) -> f64 {
    let mut p = Vec::new();
    let mut q = Vec::new();
    for (task, &w) in trainenv.tasks.iter().zip(trainenv.weights.probs()) {
        if w == 0.0 {
            continue;
        }
        p.push(w);
        q.push(
            testenv
                .tasks
                .iter()
                .zip(testenv.weights.probs())
                .filter(|(t, _)| *t == task)
                .map(|(_, &x)| x)
                .sum(),
        );
    }
    kl_slices(&p, &q).map_or(f64::INFINITY, |kl| n as f64 * kl)
}

/// Learner and Monte Carlo settings for the offline pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OfflineConfig {
    pub n: usize,
    pub m: usize,
    /// Noise sd of the per-task fit.
    pub temperature: f64,
    /// Noise sd of the meta-parameter.
    pub meta_temperature: f64,
    /// Ridge pull of the per-task fit toward `θ`.
    pub pull: f64,
    pub trials: usize,
    /// Test-task draws per trial for the population side.
    pub replicates: usize,
    /// Training draws used to estimate the output covariances.
    pub resamples: usize,
}

/// `θ = clip(mean_i fitted_q(Z_i) + noise)`.
fn meta_learn(
    mdp: &EpisodicMDP,
    datasets: &[OfflineDataset],
    cfg: &OfflineConfig,
    seed: u64,
) -> Result<(Vec<f64>, QStack), OfflineError> {
    let mean = meta_mean(mdp, datasets)?;
    let mut rng = rng_from_seed(seed);
    let noisy: Vec<f64> = mean.iter().map(|v| v + cfg.meta_temperature * standard_normal(&mut rng)).collect();
    let theta = QStack::from_values(mdp, noisy.clone())?;
    Ok((noisy, theta))
}

fn meta_mean(mdp: &EpisodicMDP, datasets: &[OfflineDataset]) -> Result<Vec<f64>, OfflineError> {
    let mut mean = vec![0.0; mdp.cells()];
    for z in datasets {
        let fit = fitted_q(mdp, z)?;
        mean.iter_mut().zip(&fit.values).for_each(|(m, v)| *m += v / datasets.len() as f64);
    }
    Ok(mean)
}

fn draw_training(
    env: &OfflineEnvironment,
    cfg: &OfflineConfig,
    seed: u64,
) -> (Vec<usize>, Vec<OfflineDataset>) {
    let mut rng = rng_from_seed(seed);
    let idx: Vec<usize> = (0..cfg.n).map(|_| env.draw(&mut rng)).collect();
    let data = idx
        .iter()
        .enumerate()
        .map(|(i, &k)| collect_offline(&env.tasks[k].mdp, &env.tasks[k].behavior, cfg.m, derive_seed(seed, i as u64 + 1)))
        .collect();
    (idx, data)
}

/// One training run evaluated on fresh test-task draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineTrial {
    pub trial: usize,
    pub seed: u64,
    pub empirical_loss: f64,
    pub population_error: f64,
    pub gap: f64,
    /// Mean `V* − V^{π_φ}` over the test draws.
    pub suboptimality: f64,
    /// Largest concentrability over the test draws, for `π*` and `π_φ`.
    pub concentrability: f64,
}

fn offline_trial(
    trainenv: &OfflineEnvironment,
    testenv: &OfflineEnvironment,
    cfg: &OfflineConfig,
    trial: usize,
    seed: u64,
) -> Result<OfflineTrial, OfflineError> {
    let s = derive_seed(seed, trial as u64);
    let (idx, data) = draw_training(trainenv, cfg, derive_seed(s, 0));
    let shape = &trainenv.tasks[0].mdp;
    let (_, theta) = meta_learn(shape, &data, cfg, derive_seed(s, 1))?;
    let mut emp = 0.0;
    for (i, (&k, z)) in idx.iter().zip(&data).enumerate() {
        let phi = fit_q_gibbs(&trainenv.tasks[k].mdp, &theta, z, cfg.temperature, cfg.pull, derive_seed(s, 100 + i as u64))?;
        emp += empirical_bellman_loss(&phi, z)? / cfg.n as f64;
    }
    let mut rng = rng_from_seed(derive_seed(s, 2));
    let (mut pop, mut sub, mut conc) = (0.0, 0.0, 0.0f64);
    for r in 0..cfg.replicates {
        let task = &testenv.tasks[testenv.draw(&mut rng)];
        let z = collect_offline(&task.mdp, &task.behavior, cfg.m, derive_seed(s, 1000 + r as u64));
        let phi = fit_q_gibbs(&task.mdp, &theta, &z, cfg.temperature, cfg.pull, derive_seed(s, 2000 + r as u64))?;
        pop += true_bellman_error(&phi, &task.mdp, &task.behavior)? / cfg.replicates as f64;
        let plan = phi.greedy_plan();
        sub += (optimal_value(&task.mdp) - plan_value(&task.mdp, &plan)) / cfg.replicates as f64;
        let star = optimal_q(&task.mdp).greedy_plan();
        conc = conc
            .max(concentrability(&task.mdp, &task.behavior, &plan)?)
            .max(concentrability(&task.mdp, &task.behavior, &star)?);
    }
    Ok(OfflineTrial {
        trial,
        seed: s,
        empirical_loss: emp,
        population_error: pop,
        gap: emp - pop,
        suboptimality: sub,
        concentrability: conc,
    })
}

/// Gaussian-channel upper bound on `I(θ, φ_{1:n}; Z_{1:n})`:
/// `½ ln det(Cov(A)/τ₀² + I) + ½ ln det(Cov(G)/τ² + I)`, where `A` is the
/// noiseless meta output, `G` the stacked noiseless task fits, and both
/// covariances are taken over fresh training draws.
///
/// Also returns the plug-in MI between the quantized meta output and the
/// drawn task tuple over the same draws, which should sit below the bound.
pub fn offline_mi_upper(trainenv: &OfflineEnvironment, cfg: &OfflineConfig, seed: u64) -> Result<(f64, f64), OfflineError> {
    if cfg.resamples < 2 {
        return Err(OfflineError::TooFew {
            what: "resamples",
            need: 2,
            got: cfg.resamples,
        });
    }
    let shape = &trainenv.tasks[0].mdp;
    let draws = (0..cfg.resamples)
        .into_par_iter()
        .map(|r| {
            let s = derive_seed(seed, r as u64);
            let (idx, data) = draw_training(trainenv, cfg, derive_seed(s, 0));
            let mean = meta_mean(shape, &data)?;
            let (_, theta) = meta_learn(shape, &data, cfg, derive_seed(s, 1))?;
            let labels = (quantized_label([theta.values()], QUANTIZATION_STEP), tuple_label(&idx, trainenv.tasks.len()));
            let mut stacked = Vec::with_capacity(cfg.n * shape.cells());
            for (&k, z) in idx.iter().zip(&data) {
                stacked.extend(ridge_fit(&trainenv.tasks[k].mdp, &theta, z, cfg.pull)?.values);
            }
            Ok((mean, stacked, labels))
        })
        .collect::<Result<Vec<_>, OfflineError>>()?;
    let mut a = Vec::with_capacity(draws.len());
    let mut g = Vec::with_capacity(draws.len());
    let (mut learners, mut tuples) = (Vec::new(), Vec::new());
    for (mean, stacked, (l, t)) in draws {
        a.push(mean);
        g.push(stacked);
        learners.push(l);
        tuples.push(t);
    }
    let ta = log_det_ratio_term(cfg.meta_temperature.powi(-2), &sample_covariance(&a)?);
    let tg = log_det_ratio_term(cfg.temperature.powi(-2), &sample_covariance(&g)?);
    Ok((0.5 * (ta + tg), plugin_mi_labels(&learners, &tuples)))
}

/// Both sides of the suboptimality chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regret2Report {
    pub left: Estimate,
    /// `2H√(C·max(J_𝒰 − J_Z, 0)) + 2H√(C·max(J_Z, 0))`.
    pub right: f64,
    /// Same with `max(J_Z − J_𝒰, 0)` in the first root.
    pub right_literal: f64,
    pub concentrability: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineReport {
    pub gap: Estimate,
    pub empirical_loss: Estimate,
    pub population_error: Estimate,
    pub mi_upper: f64,
    pub plugin_mi: f64,
    pub kl_term: f64,
    pub bound: f64,
    pub holds: bool,
    pub regret: Regret2Report,
    pub trials: Vec<OfflineTrial>,
}

/// Offline gap against its bound, and the suboptimality chain, from one set
/// of trials.
pub fn offline_check(
    trainenv: &OfflineEnvironment,
    testenv: &OfflineEnvironment,
    cfg: &OfflineConfig,
    seed: u64,
) -> Result<OfflineReport, OfflineError> {
    if cfg.trials < 2 {
        return Err(OfflineError::TooFew {
            what: "trials",
            need: 2,
            got: cfg.trials,
        });
    }
    if cfg.replicates == 0 || cfg.m == 0 || cfg.n == 0 {
        return Err(OfflineError::Invalid("n, m and replicates must be positive".into()));
    }
    let trials = (0..cfg.trials)
        .into_par_iter()
        .map(|t| offline_trial(trainenv, testenv, cfg, t, derive_seed(seed, 0)))
        .collect::<Result<Vec<_>, _>>()?;
    let col = |f: fn(&OfflineTrial) -> f64| Estimate::from_samples(&trials.iter().map(f).collect::<Vec<_>>());
    let gap = col(|t| t.gap);
    let empirical_loss = col(|t| t.empirical_loss);
    let population_error = col(|t| t.population_error);
    let left = col(|t| t.suboptimality);
    let (mi_upper, plugin_mi) = offline_mi_upper(trainenv, cfg, derive_seed(seed, 1))?;
    let kl_term = offline_kl(trainenv, testenv, cfg.n);
    let h = trainenv.horizon();
    let bound = offline_bound(mi_upper, kl_term, h, cfg.n, cfg.m);
    let c = trials.iter().map(|t| t.concentrability).fold(0.0, f64::max);
    let two_h = 2.0 * h as f64;
    let root = |x: f64| two_h * (c * x.max(0.0)).sqrt();
    let right = root(population_error.mean - empirical_loss.mean) + root(empirical_loss.mean);
    let right_literal = root(gap.mean) + root(empirical_loss.mean);
    Ok(OfflineReport {
        holds: gap.mean <= bound + 3.0 * gap.se,
        gap,
        empirical_loss,
        population_error,
        mi_upper,
        plugin_mi,
        kl_term,
        bound,
        regret: Regret2Report {
            holds: left.mean <= right + 3.0 * left.se,
            left,
            right,
            right_literal,
            concentrability: c,
        },
        trials,
    })
}

/// Suboptimality side only.
pub fn regret2_check(
    trainenv: &OfflineEnvironment,
    testenv: &OfflineEnvironment,
    cfg: &OfflineConfig,
    seed: u64,
) -> Result<Regret2Report, OfflineError> {
    Ok(offline_check(trainenv, testenv, cfg, seed)?.regret)
}

/// Mean and SE of the double-sampling loss over `trials` fresh datasets.
pub fn loss_monte_carlo(
    q: &QStack,
    mdp: &EpisodicMDP,
    behavior: &DiscreteDistribution,
    m: usize,
    trials: usize,
    seed: u64,
) -> Result<Estimate, OfflineError> {
    let losses = (0..trials)
        .into_par_iter()
        .map(|t| empirical_bellman_loss(q, &collect_offline(mdp, behavior, m, derive_seed(seed, t as u64))))
        .collect::<Result<Vec<_>, _>>()?;
    let mut acc = MeanAccumulator::default();
    losses.iter().for_each(|&l| acc.push(l));
    Ok(acc.estimate())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(h: usize) -> EpisodicMDP {
        EpisodicMDP::new(
            1,
            1,
            h,
            vec![1.0; h],
            vec![1.0],
            DiscreteDistribution::point_mass(1, 0).unwrap(),
        )
        .unwrap()
    }

    fn deterministic(h: usize, rng: &mut crate::rng::SimRng) -> EpisodicMDP {
        let (ns, na) = (3, 2);
        let mut t = Vec::new();
        for _ in 0..h * ns * na {
            let mut row = vec![0.0; ns];
            row[rng.random_range(0..ns)] = 1.0;
            t.extend(row);
        }
        let r = (0..ns * na).map(|_| rng.random::<f64>()).collect();
        EpisodicMDP::new(ns, na, h, t, r, DiscreteDistribution::uniform(ns).unwrap()).unwrap()
    }

    #[test]
    fn json_round_trip_and_flag() {
        let mut rng = rng_from_seed(1);
        let m = EpisodicMDP::random(2, 3, 2, &mut rng).unwrap();
        let json = m.to_json_string();
        assert!(json.contains("\"episodic\": true"));
        assert_eq!(EpisodicMDP::from_json_str(&json).unwrap(), m);
        assert!(EpisodicMDP::from_json_str(&json.replace("\"episodic\": true", "\"episodic\": false")).is_err());
        let env = OfflineEnvironment::random(2, 2, 2, 2, &mut rng).unwrap();
        assert_eq!(OfflineEnvironment::from_json_str(&env.to_json_string()).unwrap(), env);
    }

    #[test]
    fn bellman_apply_basics() {
        let mut rng = rng_from_seed(2);
        let m = EpisodicMDP::random(3, 2, 3, &mut rng).unwrap();
        let r: Vec<f64> = (0..6).map(|i| m.reward(i / 2, i % 2)).collect();
        assert_eq!(bellman_apply(&m, &[0.0; 6], 1), r);
        let q = optimal_q(&m);
        for h in 0..3 {
            let t = bellman_apply(&m, &q.table(h + 1), h);
            for (a, b) in t.iter().zip(q.table(h)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn optimal_q_matches_plan_values() {
        let mut rng = rng_from_seed(3);
        for _ in 0..20 {
            let m = EpisodicMDP::random(3, 2, 3, &mut rng).unwrap();
            let q = optimal_q(&m);
            let v = optimal_value(&m);
            assert!((plan_value(&m, &q.greedy_plan()) - v).abs() < 1e-12);
            for s in 0..3 {
                assert!(q.value(0, s) <= 3.0 + 1e-12);
            }
            assert!(true_bellman_error(&q, &m, &DiscreteDistribution::uniform(m.cells()).unwrap()).unwrap() < 1e-12);
        }
    }

    #[test]
    fn chain_bellman_error() {
        for h in 1..5 {
            let m = chain(h);
            let w = DiscreteDistribution::uniform(h).unwrap();
            let err = true_bellman_error(&QStack::zeros(&m), &m, &w).unwrap();
            assert!((err - 1.0 / h as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn doubling_residuals_quadruples_error() {
        // one step, so the target does not depend on Q
        let mut rng = rng_from_seed(4);
        let m = EpisodicMDP::random(2, 2, 1, &mut rng).unwrap();
        let w = DiscreteDistribution::new(random_simplex(4, &mut rng)).unwrap();
        let r: Vec<f64> = (0..4).map(|i| m.reward(i / 2, i % 2)).collect();
        let q1 = QStack::from_values(&m, r.iter().map(|x| x * 0.5).collect()).unwrap();
        let q2 = QStack::from_values(&m, r.iter().map(|_| 0.0).collect()).unwrap();
        let e1 = true_bellman_error(&q1, &m, &w).unwrap();
        let e2 = true_bellman_error(&q2, &m, &w).unwrap();
        assert!((e2 - 4.0 * e1).abs() < 1e-12);
    }

    #[test]
    fn collection_properties() {
        let mut rng = rng_from_seed(5);
        let m = deterministic(2, &mut rng);
        let b = DiscreteDistribution::uniform(m.cells()).unwrap();
        let d = collect_offline(&m, &b, 500, 1);
        assert_eq!(d.transitions.len(), 500);
        assert!(d.transitions.iter().all(|t| t.next == t.next_alt));
        assert_eq!(d, collect_offline(&m, &b, 500, 1));

        let m = EpisodicMDP::random(2, 2, 2, &mut rng).unwrap();
        let b = DiscreteDistribution::new(random_simplex(8, &mut rng)).unwrap();
        let n = 100_000;
        let d = collect_offline(&m, &b, n, 2);
        let mut counts = [0.0; 8];
        for t in &d.transitions {
            counts[m.cell(t.s, t.a, t.h)] += 1.0;
        }
        for (c, p) in counts.iter().zip(b.probs()) {
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((c / n as f64 - p).abs() <= 3.0 * se + 1e-12);
        }
    }

    #[test]
    fn deterministic_loss_is_squared_td() {
        let mut rng = rng_from_seed(6);
        let m = deterministic(3, &mut rng);
        let b = DiscreteDistribution::uniform(m.cells()).unwrap();
        let d = collect_offline(&m, &b, 200, 3);
        let q = QStack::random(&m, &mut rng);
        assert!(empirical_bellman_loss(&q, &d).unwrap() >= 0.0);
        assert!(empirical_bellman_loss(&optimal_q(&m), &d).unwrap().abs() < 1e-12);
    }

    #[test]
    fn loss_is_unbiased() {
        let mut rng = rng_from_seed(7);
        let m = EpisodicMDP::random(2, 2, 2, &mut rng).unwrap();
        let b = DiscreteDistribution::new(random_simplex(8, &mut rng)).unwrap();
        let q = QStack::random(&m, &mut rng);
        let exact = true_bellman_error(&q, &m, &b).unwrap();
        let e = loss_monte_carlo(&q, &m, &b, 50, 4000, 9).unwrap();
        assert!((e.mean - exact).abs() <= 3.0 * e.se, "{} vs {exact}", e.mean);
    }

    #[test]
    fn swap_symmetry() {
        let mut rng = rng_from_seed(8);
        let m = EpisodicMDP::random(3, 2, 2, &mut rng).unwrap();
        let b = DiscreteDistribution::uniform(m.cells()).unwrap();
        let q = QStack::random(&m, &mut rng);
        let mut diff = MeanAccumulator::default();
        for t in 0..2000 {
            let d = collect_offline(&m, &b, 20, t);
            diff.push(empirical_bellman_loss(&q, &d).unwrap() - empirical_bellman_loss(&q, &d.swapped()).unwrap());
        }
        let e = diff.estimate();
        assert!(e.mean.abs() <= 3.0 * e.se);
    }

    #[test]
    fn fit_limits() {
        let mut rng = rng_from_seed(9);
        let m = EpisodicMDP::random(2, 2, 2, &mut rng).unwrap();
        let b = DiscreteDistribution::uniform(m.cells()).unwrap();
        let d = collect_offline(&m, &b, 400, 4);
        let theta = QStack::random(&m, &mut rng);
        let plain = fitted_q(&m, &d).unwrap();
        let cold = fit_q_gibbs(&m, &theta, &d, 1e-12, 0.0, 1).unwrap();
        for (a, b) in cold.values().iter().zip(plain.values()) {
            assert!((a - b).abs() < 1e-9);
        }
        let frozen = ridge_fit(&m, &theta, &d, f64::INFINITY).unwrap();
        assert_eq!(frozen, theta);
        for seed in 0..50 {
            let hot = fit_q_gibbs(&m, &theta, &d, 5.0, 1.0, seed).unwrap();
            assert!(hot.values().iter().all(|v| (0.0..=2.0).contains(v)));
        }
        assert!(fit_q_gibbs(&m, &theta, &d, 0.0, 1.0, 1).is_err());
    }

    #[test]
    fn offline_bound_examples() {
        assert_eq!(offline_bound(0.0, 0.0, 3, 2, 2), 0.0);
        assert!((offline_bound(0.6, 0.4, 1, 4, 4) - 2.0).abs() < 1e-12);
        assert!((offline_bound(0.6, 0.4, 3, 4, 4) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn concentrability_examples() {
        let mut rng = rng_from_seed(10);
        let m = EpisodicMDP::random(3, 2, 1, &mut rng).unwrap();
        let plan = vec![vec![1, 0, 1]];
        let occ = plan_occupancy(&m, &plan);
        let b = DiscreteDistribution::new(occ.clone()).unwrap();
        assert!((concentrability(&m, &b, &plan).unwrap() - 1.0).abs() < 1e-12);

        let split: Vec<f64> = (0..m.cells()).map(|i| 0.5 * m.initial().prob(m.cell_coords(i).0)).collect();
        let b = DiscreteDistribution::new(split).unwrap();
        assert!((concentrability(&m, &b, &plan).unwrap() - 2.0).abs() < 1e-12);

        let mut holes = occ;
        holes.iter_mut().for_each(|x| *x = if *x > 0.0 { 0.0 } else { 1.0 });
        let b = DiscreteDistribution::from_weights(holes).unwrap();
        assert!(matches!(
            concentrability(&m, &b, &plan),
            Err(OfflineError::CoverageViolation { .. })
        ));
    }

    #[test]
    fn loss_range() {
        let mut rng = rng_from_seed(11);
        for h in 1..4 {
            let m = EpisodicMDP::random(2, 2, h, &mut rng).unwrap();
            let b = DiscreteDistribution::uniform(m.cells()).unwrap();
            let hf = h as f64;
            for t in 0..200 {
                let q = QStack::random(&m, &mut rng);
                let l = empirical_bellman_loss(&q, &collect_offline(&m, &b, 5, t)).unwrap();
                assert!((-2.0 * hf * hf..=4.0 * hf * hf).contains(&l));
            }
        }
    }

    #[test]
    fn offline_pipeline_holds_on_a_random_instance() {
        let mut rng = rng_from_seed(12);
        let train = OfflineEnvironment::random(2, 2, 2, 2, &mut rng).unwrap();
        let test = train.reweighted(DiscreteDistribution::new(random_simplex(2, &mut rng)).unwrap()).unwrap();
        let cfg = OfflineConfig {
            n: 4,
            m: 16,
            temperature: 0.3,
            meta_temperature: 0.3,
            pull: 1.0,
            trials: 100,
            replicates: 4,
            resamples: 128,
        };
        let r = offline_check(&train, &test, &cfg, 5).unwrap();
        assert!(r.holds, "{:?}", (r.gap, r.bound));
        assert!(r.regret.holds, "{:?}", r.regret);
        assert!(r.regret.concentrability.is_finite());
        assert!(r.plugin_mi <= r.mi_upper + 0.1, "{} {}", r.plugin_mi, r.mi_upper);
        assert_eq!(r, offline_check(&train, &test, &cfg, 5).unwrap());
    }

    #[test]
    fn optimal_fits_have_no_suboptimality() {
        let mut rng = rng_from_seed(13);
        let m = EpisodicMDP::random(2, 2, 3, &mut rng).unwrap();
        let q = optimal_q(&m);
        assert!((optimal_value(&m) - plan_value(&m, &q.greedy_plan())).abs() < 1e-12);
    }
}
