//! Finite-horizon discounted tabular MDPs with softmax policies.
//!
//! A trajectory has `H + 1` steps indexed `h = 0..=H` and its return is
//! `Σ_{h=0}^{H} γ^h r_h`. The REINFORCE estimator sums over the same index
//! range, which makes it unbiased for [`exact_return`].

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::info::{DiscreteDistribution, InfoError, MASS_TOLERANCE};
use crate::rng::{rng_from_seed, sample_index, SimRng};

/// Largest number of `(s, a)` sequences the exact enumerators will visit.
pub const ENUMERATION_LIMIT: u64 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid MDP: {0}")]
    Invalid(String),
    #[error("enumeration of {count} trajectories exceeds the limit of {limit}")]
    EnumerationTooLarge { count: u64, limit: u64 },
    #[error(transparent)]
    Distribution(#[from] InfoError),
    #[error("malformed MDP file: {0}")]
    Parse(String),
}

/// `M(S, A, P, ρ, r, γ, H)` with a stationary transition kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpFile", into = "MdpFile")]
pub struct TabularMDP {
    n_states: usize,
    n_actions: usize,
    /// `P[s][a][s']`, flattened.
    transition: Vec<f64>,
    /// `r[s][a]`, flattened.
    reward: Vec<f64>,
    initial: DiscreteDistribution,
    gamma: f64,
    horizon: usize,
}

/// On-disk JSON layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdpFile {
    pub n_states: usize,
    pub n_actions: usize,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
    pub gamma: f64,
    pub horizon: usize,
}

impl TryFrom<MdpFile> for TabularMDP {
    type Error = MdpError;
    fn try_from(f: MdpFile) -> Result<Self, MdpError> {
        if f.transition.len() != f.n_states || f.reward.len() != f.n_states {
            return Err(MdpError::DimensionMismatch(format!(
                "expected {} state rows in transition and reward",
                f.n_states
            )));
        }
        let mut transition = Vec::with_capacity(f.n_states * f.n_actions * f.n_states);
        for (s, rows) in f.transition.iter().enumerate() {
            if rows.len() != f.n_actions {
                return Err(MdpError::DimensionMismatch(format!(
                    "transition[{s}] has {} actions, expected {}",
                    rows.len(),
                    f.n_actions
                )));
            }
            for row in rows {
                transition.extend_from_slice(row);
            }
        }
        let mut reward = Vec::with_capacity(f.n_states * f.n_actions);
        for (s, row) in f.reward.iter().enumerate() {
            if row.len() != f.n_actions {
                return Err(MdpError::DimensionMismatch(format!(
                    "reward[{s}] has {} entries, expected {}",
                    row.len(),
                    f.n_actions
                )));
            }
            reward.extend_from_slice(row);
        }
        TabularMDP::new(
            f.n_states,
            f.n_actions,
            transition,
            reward,
            DiscreteDistribution::new(f.initial)?,
            f.gamma,
            f.horizon,
        )
    }
}

impl From<TabularMDP> for MdpFile {
    fn from(m: TabularMDP) -> Self {
        let (ns, na) = (m.n_states, m.n_actions);
        MdpFile {
            n_states: ns,
            n_actions: na,
            transition: (0..ns)
                .map(|s| (0..na).map(|a| m.transition_row(s, a).to_vec()).collect())
                .collect(),
            reward: m.reward.chunks(na).map(<[f64]>::to_vec).collect(),
            initial: m.initial.probs().to_vec(),
            gamma: m.gamma,
            horizon: m.horizon,
        }
    }
}

impl TabularMDP {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        initial: DiscreteDistribution,
        gamma: f64,
        horizon: usize,
    ) -> Result<Self, MdpError> {
        if n_states == 0 || n_actions == 0 {
            return Err(MdpError::Invalid("empty state or action space".into()));
        }
        if transition.len() != n_states * n_actions * n_states {
            return Err(MdpError::DimensionMismatch("transition tensor size".into()));
        }
        if reward.len() != n_states * n_actions {
            return Err(MdpError::DimensionMismatch("reward table size".into()));
        }
        if initial.len() != n_states {
            return Err(MdpError::DimensionMismatch("initial distribution size".into()));
        }
        for (i, row) in transition.chunks(n_states).enumerate() {
            let total: f64 = row.iter().sum();
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) || (total - 1.0).abs() > MASS_TOLERANCE {
                return Err(MdpError::Invalid(format!(
                    "transition row (s={}, a={}) is not a distribution",
                    i / n_actions,
                    i % n_actions
                )));
            }
        }
        if reward.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(MdpError::Invalid("rewards must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(MdpError::Invalid(format!("gamma {gamma} outside [0, 1)")));
        }
        Ok(TabularMDP {
            n_states,
            n_actions,
            transition,
            reward,
            initial,
            gamma,
            horizon,
        })
    }

    /// Random MDP with uniform rewards and transition rows drawn from a flat
    /// Dirichlet.
    pub fn random<R: Rng + ?Sized>(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        horizon: usize,
        rng: &mut R,
    ) -> Result<Self, MdpError> {
        let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            transition.extend(random_simplex(n_states, rng));
        }
        let reward = (0..n_states * n_actions).map(|_| rng.random::<f64>()).collect();
        let initial = DiscreteDistribution::new(random_simplex(n_states, rng))?;
        Self::new(n_states, n_actions, transition, reward, initial, gamma, horizon)
    }

    pub fn from_json_str(s: &str) -> Result<Self, MdpError> {
        serde_json::from_str(s).map_err(|e| MdpError::Parse(e.to_string()))
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

    /// Parameter dimension `|S|·|A|` of a softmax policy for this MDP.
    pub fn param_dim(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
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

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    /// Same dynamics with a different reward table.
    pub fn with_reward(&self, reward: Vec<f64>) -> Result<Self, MdpError> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.transition.clone(),
            reward,
            self.initial.clone(),
            self.gamma,
            self.horizon,
        )
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self, MdpError> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.transition.clone(),
            self.reward.clone(),
            self.initial.clone(),
            gamma,
            self.horizon,
        )
    }

    /// Upper bound `(1 − γ^{H+1}) / (1 − γ)` on any discounted return.
    pub fn return_bound(&self) -> f64 {
        return_bound(self.gamma, self.horizon)
    }

    fn check_policy(&self, policy: &SoftmaxPolicy) -> Result<(), MdpError> {
        if policy.n_states != self.n_states || policy.n_actions != self.n_actions {
            return Err(MdpError::DimensionMismatch(format!(
                "policy is {}×{}, MDP is {}×{}",
                policy.n_states, policy.n_actions, self.n_states, self.n_actions
            )));
        }
        Ok(())
    }

    fn trajectory_count(&self) -> u64 {
        (self.param_dim() as u64)
            .checked_pow(self.horizon as u32 + 1)
            .unwrap_or(u64::MAX)
    }
}

pub fn return_bound(gamma: f64, horizon: usize) -> f64 {
    if gamma == 0.0 {
        1.0
    } else {
        (1.0 - gamma.powi(horizon as i32 + 1)) / (1.0 - gamma)
    }
}

pub fn random_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let total: f64 = w.iter().sum();
    let mut p: Vec<f64> = w.iter().map(|x| x / total).collect();
    // Push rounding residue into the largest entry so the row sums to 1.
    let residue = 1.0 - p.iter().sum::<f64>();
    let imax = p
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i);
    p[imax] += residue;
    p
}

/// `π(a|s) ∝ exp(logit[s][a])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxPolicy {
    n_states: usize,
    n_actions: usize,
    logits: Vec<f64>,
}

impl SoftmaxPolicy {
    pub fn new(n_states: usize, n_actions: usize, logits: Vec<f64>) -> Result<Self, MdpError> {
        if logits.len() != n_states * n_actions {
            return Err(MdpError::DimensionMismatch(format!(
                "{} logits for a {n_states}×{n_actions} policy",
                logits.len()
            )));
        }
        Ok(SoftmaxPolicy {
            n_states,
            n_actions,
            logits,
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        SoftmaxPolicy {
            n_states,
            n_actions,
            logits: vec![0.0; n_states * n_actions],
        }
    }

    pub fn for_mdp(mdp: &TabularMDP, logits: &[f64]) -> Result<Self, MdpError> {
        Self::new(mdp.n_states, mdp.n_actions, logits.to_vec())
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn dim(&self) -> usize {
        self.logits.len()
    }

    pub fn probs(&self, s: usize) -> Vec<f64> {
        let row = &self.logits[s * self.n_actions..(s + 1) * self.n_actions];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    }

    /// All action distributions, row-major.
    pub fn prob_table(&self) -> Vec<f64> {
        (0..self.n_states).flat_map(|s| self.probs(s)).collect()
    }

    /// Add `weight · ∇_logits ln π(a|s)` into `out`.
    pub fn accumulate_score(&self, s: usize, a: usize, weight: f64, out: &mut [f64]) {
        let p = self.probs(s);
        let row = &mut out[s * self.n_actions..(s + 1) * self.n_actions];
        for (b, (o, pb)) in row.iter_mut().zip(&p).enumerate() {
            let ind = if b == a { 1.0 } else { 0.0 };
            *o += weight * (ind - pb);
        }
    }

    pub fn score(&self, s: usize, a: usize) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        self.accumulate_score(s, a, 1.0, &mut g);
        g
    }
}

/// `{s_h, a_h, r_h, s_{h+1}}` for `h = 0..=H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<(usize, usize, f64, usize)>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rewards(&self) -> impl Iterator<Item = f64> + '_ {
        self.steps.iter().map(|s| s.2)
    }
}

pub fn sample_trajectory(mdp: &TabularMDP, policy: &SoftmaxPolicy, seed: u64) -> Result<Trajectory, MdpError> {
    let mut rng = rng_from_seed(seed);
    sample_trajectory_with(mdp, policy, &mut rng)
}

pub fn sample_trajectory_with<R: Rng + ?Sized>(
    mdp: &TabularMDP,
    policy: &SoftmaxPolicy,
    rng: &mut R,
) -> Result<Trajectory, MdpError> {
    mdp.check_policy(policy)?;
    let probs = policy.prob_table();
    let na = mdp.n_actions;
    let mut s = sample_index(mdp.initial.probs(), rng);
    let mut steps = Vec::with_capacity(mdp.horizon + 1);
    for _ in 0..=mdp.horizon {
        let a = sample_index(&probs[s * na..(s + 1) * na], rng);
        let next = sample_index(mdp.transition_row(s, a), rng);
        steps.push((s, a, mdp.reward(s, a), next));
        s = next;
    }
    Ok(Trajectory { steps })
}

pub fn discounted_return(traj: &Trajectory, gamma: f64) -> f64 {
    let mut g = 0.0;
    let mut disc = 1.0;
    for r in traj.rewards() {
        g += disc * r;
        disc *= gamma;
    }
    g
}

/// Per-step action values `Q_h(s,a)` and state values `V_h(s)` of a policy,
/// for `h = 0..=H`, with `V_{H+1} ≡ 0`.
fn policy_tables(mdp: &TabularMDP, probs: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (ns, na, h) = (mdp.n_states, mdp.n_actions, mdp.horizon);
    let mut q = vec![vec![0.0; ns * na]; h + 1];
    let mut v = vec![vec![0.0; ns]; h + 2];
    for step in (0..=h).rev() {
        for s in 0..ns {
            let mut vs = 0.0;
            for a in 0..na {
                let cont: f64 = mdp
                    .transition_row(s, a)
                    .iter()
                    .zip(&v[step + 1])
                    .map(|(p, x)| p * x)
                    .sum();
                let qsa = mdp.reward(s, a) + mdp.gamma * cont;
                q[step][s * na + a] = qsa;
                vs += probs[s * na + a] * qsa;
            }
            v[step][s] = vs;
        }
    }
    (q, v)
}

/// Exact `J(π) = E[Σ_{h=0}^{H} γ^h r_h]` by backward recursion.
pub fn exact_return(mdp: &TabularMDP, policy: &SoftmaxPolicy) -> Result<f64, MdpError> {
    mdp.check_policy(policy)?;
    let (_, v) = policy_tables(mdp, &policy.prob_table());
    Ok(dot(mdp.initial.probs(), &v[0]))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// State distribution `d_h(s)` for `h = 0..=H` under the policy.
pub fn state_occupancy(mdp: &TabularMDP, policy: &SoftmaxPolicy) -> Result<Vec<Vec<f64>>, MdpError> {
    mdp.check_policy(policy)?;
    let probs = policy.prob_table();
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut occ = vec![mdp.initial.probs().to_vec()];
    for _ in 0..mdp.horizon {
        let prev = occ.last().expect("non-empty");
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            for a in 0..na {
                let w = prev[s] * probs[s * na + a];
                if w == 0.0 {
                    continue;
                }
                for (n, p) in next.iter_mut().zip(mdp.transition_row(s, a)) {
                    *n += w * p;
                }
            }
        }
        occ.push(next);
    }
    Ok(occ)
}

/// REINFORCE: `(Σ_h γ^h r_h) · Σ_k ∇ ln π(a_k|s_k)`, both over `0..=H`.
pub fn reinforce_gradient(traj: &Trajectory, policy: &SoftmaxPolicy, gamma: f64) -> Result<Vec<f64>, MdpError> {
    let mut g = vec![0.0; policy.dim()];
    accumulate_reinforce(traj, policy, gamma, 1.0, &mut g)?;
    Ok(g)
}

pub(crate) fn accumulate_reinforce(
    traj: &Trajectory,
    policy: &SoftmaxPolicy,
    gamma: f64,
    weight: f64,
    out: &mut [f64],
) -> Result<(), MdpError> {
    if let Some(&(s, a, _, _)) = traj
        .steps
        .iter()
        .find(|(s, a, _, _)| *s >= policy.n_states || *a >= policy.n_actions)
    {
        return Err(MdpError::DimensionMismatch(format!(
            "trajectory visits (s={s}, a={a}) outside a {}×{} policy",
            policy.n_states, policy.n_actions
        )));
    }
    let ret = discounted_return(traj, gamma) * weight;
    if ret == 0.0 {
        return Ok(());
    }
    for &(s, a, _, _) in &traj.steps {
        policy.accumulate_score(s, a, ret, out);
    }
    Ok(())
}

/// Draw a trajectory and return its REINFORCE gradient.
pub fn sampled_gradient(mdp: &TabularMDP, policy: &SoftmaxPolicy, rng: &mut SimRng) -> Result<Vec<f64>, MdpError> {
    let traj = sample_trajectory_with(mdp, policy, rng)?;
    reinforce_gradient(&traj, policy, mdp.gamma)
}

/// Visit every trajectory with positive probability, including the final
/// next state, together with its probability.
pub fn for_each_trajectory<F: FnMut(&Trajectory, f64)>(
    mdp: &TabularMDP,
    policy: &SoftmaxPolicy,
    mut visit: F,
) -> Result<(), MdpError> {
    mdp.check_policy(policy)?;
    let count = mdp.trajectory_count().saturating_mul(mdp.n_states as u64);
    if count > ENUMERATION_LIMIT {
        return Err(MdpError::EnumerationTooLarge {
            count,
            limit: ENUMERATION_LIMIT,
        });
    }
    let probs = policy.prob_table();
    let mut traj = Trajectory {
        steps: Vec::with_capacity(mdp.horizon + 1),
    };
    fn rec<F: FnMut(&Trajectory, f64)>(
        mdp: &TabularMDP,
        probs: &[f64],
        s: usize,
        prob: f64,
        traj: &mut Trajectory,
        visit: &mut F,
    ) {
        let na = mdp.n_actions;
        for a in 0..na {
            let pa = prob * probs[s * na + a];
            if pa == 0.0 {
                continue;
            }
            for (next, &pn) in mdp.transition_row(s, a).iter().enumerate() {
                if pn == 0.0 {
                    continue;
                }
                traj.steps.push((s, a, mdp.reward(s, a), next));
                if traj.steps.len() == mdp.horizon + 1 {
                    visit(traj, pa * pn);
                } else {
                    rec(mdp, probs, next, pa * pn, traj, visit);
                }
                traj.steps.pop();
            }
        }
    }
    for (s0, &p0) in mdp.initial.probs().iter().enumerate() {
        if p0 > 0.0 {
            rec(mdp, &probs, s0, p0, &mut traj, &mut visit);
        }
    }
    Ok(())
}

/// `∇J` as `Σ_τ P(τ) R(τ) ∇ ln P(τ)` over every `(s, a)` sequence of length
/// `H + 1`. The final next state integrates out and is not enumerated.
pub fn exact_policy_gradient(mdp: &TabularMDP, policy: &SoftmaxPolicy) -> Result<Vec<f64>, MdpError> {
    mdp.check_policy(policy)?;
    let count = mdp.trajectory_count();
    if count > ENUMERATION_LIMIT {
        return Err(MdpError::EnumerationTooLarge {
            count,
            limit: ENUMERATION_LIMIT,
        });
    }
    let probs = policy.prob_table();
    let d = policy.dim();
    let mut grad = vec![0.0; d];
    let mut score = vec![0.0; d];

    struct Walk<'a> {
        mdp: &'a TabularMDP,
        policy: &'a SoftmaxPolicy,
        probs: &'a [f64],
        grad: &'a mut [f64],
        score: &'a mut [f64],
    }

    impl Walk<'_> {
        fn step(&mut self, h: usize, s: usize, prob: f64, ret: f64) {
            let na = self.mdp.n_actions;
            let disc = self.mdp.gamma.powi(h as i32);
            for a in 0..na {
                let pa = prob * self.probs[s * na + a];
                if pa == 0.0 {
                    continue;
                }
                let ret_a = ret + disc * self.mdp.reward(s, a);
                self.policy.accumulate_score(s, a, 1.0, self.score);
                if h == self.mdp.horizon {
                    for (g, sc) in self.grad.iter_mut().zip(self.score.iter()) {
                        *g += pa * ret_a * sc;
                    }
                } else {
                    for (next, &pn) in self.mdp.transition_row(s, a).iter().enumerate() {
                        if pn > 0.0 {
                            self.step(h + 1, next, pa * pn, ret_a);
                        }
                    }
                }
                self.policy.accumulate_score(s, a, -1.0, self.score);
            }
        }
    }

    let mut walk = Walk {
        mdp,
        policy,
        probs: &probs,
        grad: &mut grad,
        score: &mut score,
    };
    for (s0, &p0) in mdp.initial.probs().iter().enumerate() {
        if p0 > 0.0 {
            walk.step(0, s0, p0, 0.0);
        }
    }
    Ok(grad)
}

/// `E[reinforce_gradient]`, weighting every enumerated trajectory by its
/// probability.
pub fn expected_reinforce_gradient(mdp: &TabularMDP, policy: &SoftmaxPolicy) -> Result<Vec<f64>, MdpError> {
    let mut grad = vec![0.0; policy.dim()];
    let mut failure = None;
    for_each_trajectory(mdp, policy, |t, p| match reinforce_gradient(t, policy, mdp.gamma) {
        Ok(g) => grad.iter_mut().zip(g).for_each(|(acc, x)| *acc += p * x),
        Err(e) => failure = Some(e),
    })?;
    failure.map_or(Ok(grad), Err)
}

/// Central differences of [`exact_return`] in each logit.
pub fn finite_difference_gradient(mdp: &TabularMDP, logits: &[f64], step: f64) -> Result<Vec<f64>, MdpError> {
    let mut x = logits.to_vec();
    (0..logits.len())
        .map(|i| {
            x[i] = logits[i] + step;
            let up = exact_return(mdp, &SoftmaxPolicy::for_mdp(mdp, &x)?)?;
            x[i] = logits[i] - step;
            let down = exact_return(mdp, &SoftmaxPolicy::for_mdp(mdp, &x)?)?;
            x[i] = logits[i];
            Ok((up - down) / (2.0 * step))
        })
        .collect()
}

/// `∇J = Σ_h γ^h Σ_s d_h(s) Σ_a π(a|s) Q_h(s,a) ∇ ln π(a|s)`, in
/// `O(H·|S|²·|A|)` without enumeration.
pub fn policy_gradient_dp(mdp: &TabularMDP, policy: &SoftmaxPolicy) -> Result<Vec<f64>, MdpError> {
    let occ = state_occupancy(mdp, policy)?;
    let probs = policy.prob_table();
    let (q, _) = policy_tables(mdp, &probs);
    let na = mdp.n_actions;
    let mut grad = vec![0.0; policy.dim()];
    let mut disc = 1.0;
    for h in 0..=mdp.horizon {
        for s in 0..mdp.n_states {
            if occ[h][s] == 0.0 {
                continue;
            }
            for a in 0..na {
                let w = disc * occ[h][s] * probs[s * na + a] * q[h][s * na + a];
                policy.accumulate_score(s, a, w, &mut grad);
            }
        }
        disc *= mdp.gamma;
    }
    Ok(grad)
}

/// Optimal values `V*_h` for `h = 0..=H+1` (the last is the zero terminal)
/// and the greedy non-stationary deterministic policy `plan[h][s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalSolution {
    pub values: Vec<Vec<f64>>,
    pub plan: Vec<Vec<usize>>,
}

impl OptimalSolution {
    pub fn value_from_initial(&self, mdp: &TabularMDP) -> f64 {
        dot(mdp.initial.probs(), &self.values[0])
    }
}

/// Backward induction. Ties go to the lowest action index.
pub fn value_iteration_finite_horizon(mdp: &TabularMDP) -> OptimalSolution {
    let (ns, na, h) = (mdp.n_states, mdp.n_actions, mdp.horizon);
    let mut values = vec![vec![0.0; ns]; h + 2];
    let mut plan = vec![vec![0; ns]; h + 1];
    for step in (0..=h).rev() {
        for s in 0..ns {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for a in 0..na {
                let q = mdp.reward(s, a) + mdp.gamma * dot(mdp.transition_row(s, a), &values[step + 1]);
                if q > best {
                    best = q;
                    arg = a;
                }
            }
            values[step][s] = best;
            plan[step][s] = arg;
        }
    }
    OptimalSolution { values, plan }
}

/// Exact return of a non-stationary deterministic plan `plan[h][s]`.
pub fn evaluate_plan(mdp: &TabularMDP, plan: &[Vec<usize>]) -> Result<f64, MdpError> {
    if plan.len() != mdp.horizon + 1 || plan.iter().any(|p| p.len() != mdp.n_states) {
        return Err(MdpError::DimensionMismatch("plan shape".into()));
    }
    let ns = mdp.n_states;
    let mut v = vec![0.0; ns];
    for step in (0..=mdp.horizon).rev() {
        let next: Vec<f64> = (0..ns)
            .map(|s| {
                let a = plan[step][s];
                mdp.reward(s, a) + mdp.gamma * dot(mdp.transition_row(s, a), &v)
            })
            .collect();
        v = next;
    }
    Ok(dot(mdp.initial.probs(), &v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_seed, standard_normal};

    fn chain(horizon: usize, gamma: f64) -> TabularMDP {
        // two states, two actions; action 0 stays, action 1 switches
        let transition = vec![
            1.0, 0.0, 0.0, 1.0, //
            0.0, 1.0, 1.0, 0.0,
        ];
        TabularMDP::new(
            2,
            2,
            transition,
            vec![1.0, 0.0, 0.0, 0.5],
            DiscreteDistribution::point_mass(2, 0).unwrap(),
            gamma,
            horizon,
        )
        .unwrap()
    }

    fn single_state(reward: f64, horizon: usize, gamma: f64) -> TabularMDP {
        TabularMDP::new(
            1,
            2,
            vec![1.0, 1.0],
            vec![reward, reward],
            DiscreteDistribution::point_mass(1, 0).unwrap(),
            gamma,
            horizon,
        )
        .unwrap()
    }

    #[test]
    fn gradient_oracles_agree() {
        let mut rng = rng_from_seed(77);
        for _ in 0..5 {
            let mdp = TabularMDP::random(2, 2, 0.7, 2, &mut rng).unwrap();
            let logits: Vec<f64> = (0..4).map(|_| standard_normal(&mut rng)).collect();
            let policy = SoftmaxPolicy::for_mdp(&mdp, &logits).unwrap();
            let exact = exact_policy_gradient(&mdp, &policy).unwrap();
            let mean = expected_reinforce_gradient(&mdp, &policy).unwrap();
            let fd = finite_difference_gradient(&mdp, &logits, 1e-5).unwrap();
            for ((a, b), c) in exact.iter().zip(&mean).zip(&fd) {
                assert!((a - b).abs() < 1e-12);
                assert!((a - c).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn rejects_bad_rewards_and_gamma() {
        let init = DiscreteDistribution::point_mass(1, 0).unwrap();
        assert!(TabularMDP::new(1, 1, vec![1.0], vec![1.5], init.clone(), 0.5, 1).is_err());
        assert!(TabularMDP::new(1, 1, vec![1.0], vec![0.5], init.clone(), 1.0, 1).is_err());
        assert!(TabularMDP::new(1, 1, vec![0.9], vec![0.5], init, 0.5, 1).is_err());
    }

    #[test]
    fn json_round_trip() {
        let mut rng = rng_from_seed(9);
        let mdp = TabularMDP::random(3, 2, 0.8, 4, &mut rng).unwrap();
        let back = TabularMDP::from_json_str(&mdp.to_json_string()).unwrap();
        assert_eq!(mdp, back);
        let bad = r#"{"n_states":1,"n_actions":1,"transition":[[[0.5]]],"reward":[[0.0]],"initial":[1.0],"gamma":0.5,"horizon":1}"#;
        assert!(TabularMDP::from_json_str(bad).is_err());
    }

    #[test]
    fn deterministic_mdp_gives_unique_trajectory() {
        let mdp = chain(3, 0.9);
        // action 1 always (switch)
        let policy = SoftmaxPolicy::new(2, 2, vec![-60.0, 60.0, -60.0, 60.0]).unwrap();
        let t = sample_trajectory(&mdp, &policy, 4).unwrap();
        let states: Vec<usize> = t.steps.iter().map(|s| s.0).collect();
        assert_eq!(states, vec![0, 1, 0, 1]);
        assert!(t.steps.iter().all(|s| s.1 == 1));
        assert_eq!(t.len(), 4);
    }

    #[test]
    fn sampling_is_seeded() {
        let mut rng = rng_from_seed(1);
        let mdp = TabularMDP::random(3, 3, 0.9, 6, &mut rng).unwrap();
        let policy = SoftmaxPolicy::uniform(3, 3);
        assert_eq!(
            sample_trajectory(&mdp, &policy, 77).unwrap(),
            sample_trajectory(&mdp, &policy, 77).unwrap()
        );
    }

    #[test]
    fn empirical_visits_match_occupancy() {
        let mut rng = rng_from_seed(2);
        let mdp = TabularMDP::random(3, 2, 0.9, 3, &mut rng).unwrap();
        let policy = SoftmaxPolicy::new(3, 2, vec![0.3, -0.2, 1.0, 0.0, -0.5, 0.4]).unwrap();
        let occ = state_occupancy(&mdp, &policy).unwrap();
        let trials = 100_000;
        let mut counts = vec![vec![0.0; 3]; 4];
        let mut srng = rng_from_seed(3);
        for _ in 0..trials {
            let t = sample_trajectory_with(&mdp, &policy, &mut srng).unwrap();
            for (h, step) in t.steps.iter().enumerate() {
                counts[h][step.0] += 1.0;
            }
        }
        for h in 0..4 {
            for s in 0..3 {
                let p = occ[h][s];
                let freq = counts[h][s] / trials as f64;
                let se = (p * (1.0 - p) / trials as f64).sqrt().max(1e-12);
                assert!((freq - p).abs() <= 3.0 * se + 1e-12, "h={h} s={s} freq={freq} p={p}");
            }
        }
    }

    #[test]
    fn discounted_return_examples() {
        let t = Trajectory {
            steps: vec![(0, 0, 1.0, 0), (0, 0, 1.0, 0), (0, 0, 1.0, 0)],
        };
        assert_eq!(discounted_return(&t, 0.5), 1.75);
        assert_eq!(discounted_return(&t, 0.0), 1.0);
        let z = Trajectory {
            steps: vec![(0, 0, 0.0, 0); 3],
        };
        assert_eq!(discounted_return(&z, 0.7), 0.0);
    }

    #[test]
    fn exact_return_examples() {
        let mdp = single_state(1.0, 2, 0.5);
        let r = exact_return(&mdp, &SoftmaxPolicy::uniform(1, 2)).unwrap();
        assert!((r - 1.75).abs() < 1e-15);
        let zero = single_state(0.0, 5, 0.9);
        assert_eq!(exact_return(&zero, &SoftmaxPolicy::uniform(1, 2)).unwrap(), 0.0);
        assert!(exact_return(&zero, &SoftmaxPolicy::uniform(2, 2)).is_err());
    }

    #[test]
    fn exact_return_matches_enumeration() {
        for seed in 0..5 {
            let mut rng = rng_from_seed(derive_seed(100, seed));
            for h in 0..=3 {
                let mdp = TabularMDP::random(3, 2, 0.85, h, &mut rng).unwrap();
                let logits: Vec<f64> = (0..6).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
                let policy = SoftmaxPolicy::new(3, 2, logits).unwrap();
                let mut brute = 0.0;
                for_each_trajectory(&mdp, &policy, |t, p| brute += p * discounted_return(t, mdp.gamma())).unwrap();
                let exact = exact_return(&mdp, &policy).unwrap();
                assert!((brute - exact).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn reinforce_hand_example() {
        let t = Trajectory {
            steps: vec![(0, 0, 1.0, 0)],
        };
        let g = reinforce_gradient(&t, &SoftmaxPolicy::uniform(1, 2), 0.9).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-15 && (g[1] + 0.5).abs() < 1e-15);
        let z = Trajectory {
            steps: vec![(0, 1, 0.0, 0), (0, 0, 0.0, 0)],
        };
        assert!(reinforce_gradient(&z, &SoftmaxPolicy::uniform(1, 2), 0.9)
            .unwrap()
            .iter()
            .all(|&x| x == 0.0));
        let out_of_range = Trajectory {
            steps: vec![(3, 0, 1.0, 0)],
        };
        assert!(reinforce_gradient(&out_of_range, &SoftmaxPolicy::uniform(1, 2), 0.9).is_err());
    }

    #[test]
    fn score_rows_sum_to_zero() {
        let policy = SoftmaxPolicy::new(2, 3, vec![0.1, 2.0, -1.0, 0.0, 0.5, 3.0]).unwrap();
        for s in 0..2 {
            for a in 0..3 {
                let g = policy.score(s, a);
                let row: f64 = g[s * 3..s * 3 + 3].iter().sum();
                assert!(row.abs() < 1e-12);
            }
            let p: f64 = policy.probs(s).iter().sum();
            assert!((p - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_reward_has_zero_gradient() {
        let mut rng = rng_from_seed(4);
        let base = TabularMDP::random(2, 2, 0.9, 2, &mut rng).unwrap();
        let mdp = base.with_reward(vec![0.4; 4]).unwrap();
        let policy = SoftmaxPolicy::new(2, 2, vec![0.3, -1.0, 0.7, 0.2]).unwrap();
        let g = exact_policy_gradient(&mdp, &policy).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn enumeration_guard() {
        let mut rng = rng_from_seed(4);
        let mdp = TabularMDP::random(4, 4, 0.9, 6, &mut rng).unwrap();
        assert!(matches!(
            exact_policy_gradient(&mdp, &SoftmaxPolicy::uniform(4, 4)),
            Err(MdpError::EnumerationTooLarge { .. })
        ));
    }

    #[test]
    fn gradient_routes_agree() {
        let mut rng = rng_from_seed(8);
        for _ in 0..5 {
            let mdp = TabularMDP::random(3, 2, 0.8, 3, &mut rng).unwrap();
            let logits: Vec<f64> = (0..6).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let policy = SoftmaxPolicy::new(3, 2, logits).unwrap();
            let a = exact_policy_gradient(&mdp, &policy).unwrap();
            let b = policy_gradient_dp(&mdp, &policy).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn value_iteration_examples() {
        let mdp = single_state(1.0, 3, 0.5);
        let sol = value_iteration_finite_horizon(&mdp);
        assert!((sol.values[0][0] - (1.0 + 0.5 + 0.25 + 0.125)).abs() < 1e-15);

        let mut rng = rng_from_seed(12);
        let one_step = TabularMDP::random(3, 3, 0.9, 0, &mut rng).unwrap();
        let sol = value_iteration_finite_horizon(&one_step);
        for s in 0..3 {
            let best = (0..3).map(|a| one_step.reward(s, a)).fold(f64::MIN, f64::max);
            assert_eq!(sol.values[0][s], best);
        }
    }

    #[test]
    fn greedy_beats_random_policies() {
        let mut rng = rng_from_seed(13);
        let mdp = TabularMDP::random(3, 2, 0.9, 4, &mut rng).unwrap();
        let sol = value_iteration_finite_horizon(&mdp);
        let greedy = evaluate_plan(&mdp, &sol.plan).unwrap();
        assert!((greedy - sol.value_from_initial(&mdp)).abs() < 1e-12);
        for _ in 0..100 {
            let logits: Vec<f64> = (0..6).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect();
            let p = SoftmaxPolicy::new(3, 2, logits).unwrap();
            assert!(exact_return(&mdp, &p).unwrap() <= greedy + 1e-12);
        }
    }

    #[test]
    fn ties_break_to_lowest_action() {
        let mdp = single_state(0.3, 1, 0.5);
        let sol = value_iteration_finite_horizon(&mdp);
        assert_eq!(sol.plan, vec![vec![0], vec![0]]);
    }
}
