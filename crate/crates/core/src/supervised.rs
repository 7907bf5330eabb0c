//! Meta-supervised learning on finite alphabets with Gibbs learners.
//!
//! A dataset is a tuple of `m` sample indices. The base learner places a Gibbs
//! posterior over a hypothesis grid given `(θ, Z)`, and the meta learner places
//! a Gibbs posterior over the θ grid given the empirical meta-risk of
//! `Z_{1:n}`. Because both posteriors are explicit, every mutual-information
//! and KL term of the OOD bound can be enumerated exactly at small sizes.
//!
//! The subtask half of the module builds super-samples (paired task/dataset
//! draws with Rademacher selectors) and estimates the conditional-MI bound by
//! sign resampling.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::info::{binned_mi_binary, kl_slices, mutual_information, DiscreteDistribution, InfoError, JointTable};
use crate::mdp::random_simplex;
use crate::rng::{derive_seed, rademacher, rng_from_seed, sample_index, SimRng};
use crate::stats::{Estimate, MeanAccumulator};

/// Sub-Gaussian parameter of a loss bounded in `[0, 1]`.
pub const LOSS_SIGMA: f64 = 0.5;
/// Largest dataset or joint-table enumeration the exact routines accept.
pub const DATASET_ENUMERATION_LIMIT: u64 = 1_000_000;
pub const JOINT_ENUMERATION_LIMIT: u64 = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SupervisedError {
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("invalid environment: {0}")]
    InvalidEnvironment(String),
    #[error("invalid learner: {0}")]
    InvalidLearner(String),
    #[error("enumeration of {count} outcomes exceeds the limit of {limit}")]
    EnumerationTooLarge { count: u64, limit: u64 },
    #[error("exact enumeration needs one loss table shared by every task")]
    LossTablesDiffer,
    #[error("every one of {0} super-sample draws missed the target task")]
    AllDrawsDegenerate(usize),
    #[error(transparent)]
    Distribution(#[from] InfoError),
    #[error("malformed environment file: {0}")]
    Parse(String),
}

/// A sample distribution over a finite alphabet and a loss `ℓ[w][s] ∈ [0,1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteTask {
    pub sample_dist: DiscreteDistribution,
    pub loss_table: Vec<Vec<f64>>,
}

impl FiniteTask {
    pub fn new(sample_dist: DiscreteDistribution, loss_table: Vec<Vec<f64>>) -> Result<Self, SupervisedError> {
        let t = FiniteTask {
            sample_dist,
            loss_table,
        };
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<(), SupervisedError> {
        if self.loss_table.is_empty() {
            return Err(SupervisedError::InvalidTask("empty hypothesis set".into()));
        }
        if self.loss_table.iter().any(|r| r.len() != self.sample_dist.len()) {
            return Err(SupervisedError::InvalidTask(
                "loss table width differs from the alphabet size".into(),
            ));
        }
        if self.loss_table.iter().flatten().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(SupervisedError::InvalidTask("losses must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn alphabet(&self) -> usize {
        self.sample_dist.len()
    }

    pub fn hypotheses(&self) -> usize {
        self.loss_table.len()
    }

    pub fn loss(&self, w: usize, s: usize) -> f64 {
        self.loss_table[w][s]
    }

    /// `L(w, Z) = (1/m) Σ_j ℓ(w, s_j)`.
    pub fn empirical_loss(&self, w: usize, dataset: &[usize]) -> f64 {
        dataset.iter().map(|&s| self.loss(w, s)).sum::<f64>() / dataset.len() as f64
    }

    /// `E_{S~task} ℓ(w, S)`.
    pub fn risk(&self, w: usize) -> f64 {
        self.sample_dist
            .probs()
            .iter()
            .zip(&self.loss_table[w])
            .map(|(p, l)| p * l)
            .sum()
    }

    /// `Π_j P(s_j)`.
    pub fn dataset_prob(&self, dataset: &[usize]) -> f64 {
        dataset.iter().map(|&s| self.sample_dist.prob(s)).product()
    }

    pub fn draw_dataset<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Vec<usize> {
        (0..m).map(|_| sample_index(self.sample_dist.probs(), rng)).collect()
    }
}

/// A weighted family of tasks over a common alphabet and hypothesis set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EnvironmentFile", into = "EnvironmentFile")]
pub struct TaskEnvironment {
    tasks: Vec<FiniteTask>,
    weights: DiscreteDistribution,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvironmentFile {
    pub tasks: Vec<FiniteTask>,
    pub weights: Vec<f64>,
}

impl TryFrom<EnvironmentFile> for TaskEnvironment {
    type Error = SupervisedError;
    fn try_from(f: EnvironmentFile) -> Result<Self, SupervisedError> {
        for t in &f.tasks {
            t.validate()?;
        }
        TaskEnvironment::new(f.tasks, DiscreteDistribution::new(f.weights)?)
    }
}

impl From<TaskEnvironment> for EnvironmentFile {
    fn from(e: TaskEnvironment) -> Self {
        EnvironmentFile {
            tasks: e.tasks,
            weights: e.weights.into(),
        }
    }
}

impl TaskEnvironment {
    pub fn new(tasks: Vec<FiniteTask>, weights: DiscreteDistribution) -> Result<Self, SupervisedError> {
        let first = tasks
            .first()
            .ok_or_else(|| SupervisedError::InvalidEnvironment("no tasks".into()))?;
        if weights.len() != tasks.len() {
            return Err(SupervisedError::InvalidEnvironment(format!(
                "{} weights for {} tasks",
                weights.len(),
                tasks.len()
            )));
        }
        if tasks
            .iter()
            .any(|t| t.alphabet() != first.alphabet() || t.hypotheses() != first.hypotheses())
        {
            return Err(SupervisedError::InvalidEnvironment(
                "tasks disagree on alphabet or hypothesis count".into(),
            ));
        }
        Ok(TaskEnvironment { tasks, weights })
    }

    pub fn single(task: FiniteTask) -> Self {
        TaskEnvironment {
            tasks: vec![task],
            weights: DiscreteDistribution::point_mass(1, 0).expect("one task"),
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self, SupervisedError> {
        serde_json::from_str(s).map_err(|e| SupervisedError::Parse(e.to_string()))
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("environment serialization is infallible")
    }

    pub fn tasks(&self) -> &[FiniteTask] {
        &self.tasks
    }

    pub fn weights(&self) -> &DiscreteDistribution {
        &self.weights
    }

    pub fn alphabet(&self) -> usize {
        self.tasks[0].alphabet()
    }

    pub fn hypotheses(&self) -> usize {
        self.tasks[0].hypotheses()
    }

    /// Same tasks, different weights.
    pub fn reweighted(&self, weights: DiscreteDistribution) -> Result<Self, SupervisedError> {
        Self::new(self.tasks.clone(), weights)
    }

    /// Marginal probability of an unlabeled dataset under the task mixture.
    pub fn dataset_prob(&self, dataset: &[usize]) -> f64 {
        self.tasks
            .iter()
            .zip(self.weights.probs())
            .map(|(t, w)| w * t.dataset_prob(dataset))
            .sum()
    }

    fn shared_loss(&self) -> Result<&FiniteTask, SupervisedError> {
        let first = &self.tasks[0];
        if self.tasks.iter().any(|t| t.loss_table != first.loss_table) {
            return Err(SupervisedError::LossTablesDiffer);
        }
        Ok(first)
    }
}

/// Gibbs base learner over hypotheses and Gibbs meta learner over θ.
///
/// `base_temperature` and `meta_temperature` multiply the objective, so the
/// `→ 0⁺` limit yields uniform posteriors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibbsLearnerSpec {
    pub hypothesis_grid: Vec<usize>,
    pub theta_grid: Vec<usize>,
    pub base_temperature: f64,
    pub meta_temperature: f64,
    pub coupling: f64,
}

impl GibbsLearnerSpec {
    pub fn new(
        hypotheses: usize,
        thetas: usize,
        base_temperature: f64,
        meta_temperature: f64,
        coupling: f64,
    ) -> Result<Self, SupervisedError> {
        let spec = GibbsLearnerSpec {
            hypothesis_grid: (0..hypotheses).collect(),
            theta_grid: (0..thetas).collect(),
            base_temperature,
            meta_temperature,
            coupling,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SupervisedError> {
        if self.hypothesis_grid.is_empty() || self.theta_grid.is_empty() {
            return Err(SupervisedError::InvalidLearner("empty grid".into()));
        }
        if !(self.base_temperature > 0.0 && self.meta_temperature > 0.0) {
            return Err(SupervisedError::InvalidLearner("temperatures must be positive".into()));
        }
        if !(self.coupling >= 0.0) {
            return Err(SupervisedError::InvalidLearner("coupling must be nonnegative".into()));
        }
        Ok(())
    }

    /// Squared distance between the grid positions of `w` and `θ`, both
    /// mapped evenly onto `[0, 1]`.
    pub fn penalty(&self, w_pos: usize, theta_pos: usize) -> f64 {
        let pos = |i: usize, len: usize| if len > 1 { i as f64 / (len - 1) as f64 } else { 0.0 };
        let d = pos(w_pos, self.hypothesis_grid.len()) - pos(theta_pos, self.theta_grid.len());
        d * d
    }
}

fn gibbs(energies: &[f64]) -> Vec<f64> {
    let min = energies.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = energies.iter().map(|e| (-(e - min)).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// `P(w | Z, θ) ∝ exp(−β [m L(w, Z) + c · penalty(w, θ)])` over the grid.
pub fn base_posterior(
    theta: usize,
    dataset: &[usize],
    task: &FiniteTask,
    spec: &GibbsLearnerSpec,
) -> DiscreteDistribution {
    DiscreteDistribution::new(base_posterior_probs(theta, dataset, task, spec))
        .unwrap_or_else(|_| DiscreteDistribution::uniform(spec.hypothesis_grid.len()).expect("non-empty grid"))
}

fn base_posterior_probs(theta: usize, dataset: &[usize], task: &FiniteTask, spec: &GibbsLearnerSpec) -> Vec<f64> {
    let m = dataset.len() as f64;
    let energies: Vec<f64> = spec
        .hypothesis_grid
        .iter()
        .enumerate()
        .map(|(pos, &w)| {
            spec.base_temperature * (m * task.empirical_loss(w, dataset) + spec.coupling * spec.penalty(pos, theta))
        })
        .collect();
    gibbs(&energies)
}

/// `E_{W~P(·|Z,θ)} L(W, Z)`.
pub fn adapted_empirical_loss(theta: usize, dataset: &[usize], task: &FiniteTask, spec: &GibbsLearnerSpec) -> f64 {
    base_posterior_probs(theta, dataset, task, spec)
        .iter()
        .zip(&spec.hypothesis_grid)
        .map(|(p, &w)| p * task.empirical_loss(w, dataset))
        .sum()
}

/// `(1/n) Σ_i E_{W|Z_i,θ} L(W, Z_i)`, every dataset scored with `task`'s loss.
pub fn empirical_meta_risk(theta: usize, datasets: &[Vec<usize>], task: &FiniteTask, spec: &GibbsLearnerSpec) -> f64 {
    datasets
        .iter()
        .map(|z| adapted_empirical_loss(theta, z, task, spec))
        .sum::<f64>()
        / datasets.len() as f64
}

/// `P(θ | Z_{1:n}) ∝ exp(−meta_temperature · empirical_meta_risk)` given the
/// per-θ risks.
pub fn meta_posterior_from_risks(risks: &[f64], spec: &GibbsLearnerSpec) -> Vec<f64> {
    let energies: Vec<f64> = risks.iter().map(|r| spec.meta_temperature * r).collect();
    gibbs(&energies)
}

fn all_datasets(alphabet: usize, m: usize) -> Result<Vec<Vec<usize>>, SupervisedError> {
    let count = (alphabet as u64).checked_pow(m as u32).unwrap_or(u64::MAX);
    if count > DATASET_ENUMERATION_LIMIT {
        return Err(SupervisedError::EnumerationTooLarge {
            count,
            limit: DATASET_ENUMERATION_LIMIT,
        });
    }
    Ok(cartesian(alphabet, m))
}

/// All length-`len` tuples over `0..base`, last coordinate fastest.
fn cartesian(base: usize, len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..base).map(move |x| {
                    let mut p = prefix.clone();
                    p.push(x);
                    p
                })
            })
            .collect();
    }
    out
}

/// `L_𝒰(θ) = E_{μ~env} E_{Z~μ^m} E_{W|Z,θ} E_{S~μ} ℓ(W, S)`, exactly.
pub fn population_meta_risk(
    theta: usize,
    env: &TaskEnvironment,
    m: usize,
    spec: &GibbsLearnerSpec,
) -> Result<f64, SupervisedError> {
    let datasets = all_datasets(env.alphabet(), m)?;
    let mut total = 0.0;
    for (task, &w_task) in env.tasks.iter().zip(env.weights.probs()) {
        if w_task == 0.0 {
            continue;
        }
        let risks: Vec<f64> = spec.hypothesis_grid.iter().map(|&w| task.risk(w)).collect();
        for z in &datasets {
            let pz = task.dataset_prob(z);
            if pz == 0.0 {
                continue;
            }
            let post = base_posterior_probs(theta, z, task, spec);
            total += w_task * pz * post.iter().zip(&risks).map(|(p, r)| p * r).sum::<f64>();
        }
    }
    Ok(total)
}

/// Exact joint law of `(Z_{1:n}, θ, W_{1:n})` for i.i.d. unlabeled datasets
/// from a training environment.
#[derive(Debug, Clone)]
pub struct JointEnumeration {
    pub n: usize,
    pub m: usize,
    /// Every dataset of length `m`, indexing the per-task dataset axes.
    pub datasets: Vec<Vec<usize>>,
    /// `P(Z)` for a single dataset.
    pub dataset_probs: Vec<f64>,
    /// Tuples of dataset indices, one per row of `joint`.
    pub tuples: Vec<Vec<usize>>,
    /// `P(Z_{1:n})` per tuple.
    pub tuple_probs: Vec<f64>,
    /// `P(θ | Z_{1:n})` per tuple.
    pub meta_posteriors: Vec<Vec<f64>>,
    /// Rows: dataset tuples. Columns: `θ · |W|^n + Σ_i w_i |W|^i`.
    pub joint: JointTable,
    thetas: usize,
    hypotheses: usize,
}

impl JointEnumeration {
    /// `I(θ, W_{1:n}; Z_{1:n})`.
    pub fn mi_joint(&self) -> f64 {
        mutual_information(&self.joint)
    }

    /// `I(θ; Z_{1:n})`.
    pub fn mi_theta(&self) -> f64 {
        let rows: Vec<Vec<f64>> = self
            .tuple_probs
            .iter()
            .zip(&self.meta_posteriors)
            .map(|(pz, post)| post.iter().map(|p| pz * p).collect())
            .collect();
        JointTable::from_counts(self.tuples.len(), self.thetas, rows.concat())
            .map(|j| mutual_information(&j))
            .unwrap_or(0.0)
    }

    /// `I(W_i; Z_i | θ)` for task slot `i`.
    pub fn task_cmi(&self, i: usize) -> f64 {
        let nd = self.datasets.len();
        let nw = self.hypotheses;
        // mass[θ][z_i][w_i]
        let mut mass = vec![0.0; self.thetas * nd * nw];
        let stride = nw.pow(i as u32);
        let per_theta = nw.pow(self.n as u32);
        for (row, tuple) in self.tuples.iter().enumerate() {
            let zi = tuple[i];
            for col in 0..self.thetas * per_theta {
                let p = self.joint.get(row, col);
                if p == 0.0 {
                    continue;
                }
                let th = col / per_theta;
                let wi = (col % per_theta) / stride % nw;
                mass[(th * nd + zi) * nw + wi] += p;
            }
        }
        let mut cmi = 0.0;
        for th in 0..self.thetas {
            let block = &mass[th * nd * nw..(th + 1) * nd * nw];
            let w: f64 = block.iter().sum();
            if w > 0.0 {
                if let Ok(j) = JointTable::from_counts(nd, nw, block.to_vec()) {
                    cmi += w * mutual_information(&j);
                }
            }
        }
        cmi
    }
}

/// Enumerate the joint law of the meta-dataset, meta-parameter, and adapted
/// hypotheses under `trainenv`.
pub fn exact_joint_enumeration(
    trainenv: &TaskEnvironment,
    n: usize,
    m: usize,
    spec: &GibbsLearnerSpec,
) -> Result<JointEnumeration, SupervisedError> {
    spec.validate()?;
    let task = trainenv.shared_loss()?;
    let nt = spec.theta_grid.len();
    let nw = spec.hypothesis_grid.len();
    let guard = (trainenv.tasks.len() as u64)
        .saturating_mul((trainenv.alphabet() as u64).saturating_pow(m as u32))
        .saturating_pow(n as u32)
        .saturating_mul(nt as u64);
    if guard > JOINT_ENUMERATION_LIMIT {
        return Err(SupervisedError::EnumerationTooLarge {
            count: guard,
            limit: JOINT_ENUMERATION_LIMIT,
        });
    }
    let datasets = all_datasets(trainenv.alphabet(), m)?;
    let nd = datasets.len();
    let cols = nt * nw.pow(n as u32);
    let cells = (nd.pow(n as u32) as u64).saturating_mul(cols as u64);
    if cells > JOINT_ENUMERATION_LIMIT {
        return Err(SupervisedError::EnumerationTooLarge {
            count: cells,
            limit: JOINT_ENUMERATION_LIMIT,
        });
    }
    let dataset_probs: Vec<f64> = datasets.iter().map(|z| trainenv.dataset_prob(z)).collect();
    // base posteriors and adapted losses per (θ, dataset)
    let posts: Vec<Vec<Vec<f64>>> = (0..nt)
        .map(|th| datasets.iter().map(|z| base_posterior_probs(th, z, task, spec)).collect())
        .collect();
    let adapted: Vec<Vec<f64>> = (0..nt)
        .map(|th| {
            datasets
                .iter()
                .zip(&posts[th])
                .map(|(z, p)| {
                    p.iter()
                        .zip(&spec.hypothesis_grid)
                        .map(|(pw, &w)| pw * task.empirical_loss(w, z))
                        .sum()
                })
                .collect()
        })
        .collect();

    let tuples = cartesian(nd, n);
    let w_tuples = cartesian(nw, n);
    let mut tuple_probs = Vec::with_capacity(tuples.len());
    let mut meta_posteriors = Vec::with_capacity(tuples.len());
    let mut mass = Vec::with_capacity(tuples.len() * cols);
    for tuple in &tuples {
        let pz: f64 = tuple.iter().map(|&k| dataset_probs[k]).product();
        let risks: Vec<f64> = (0..nt)
            .map(|th| tuple.iter().map(|&k| adapted[th][k]).sum::<f64>() / n as f64)
            .collect();
        let meta = meta_posterior_from_risks(&risks, spec);
        for (th, &pt) in meta.iter().enumerate() {
            for ws in &w_tuples {
                // column index: Σ_i w_i |W|^i, so reverse the lexicographic tuple order
                let pw: f64 = ws.iter().zip(tuple).map(|(&w, &k)| posts[th][k][w]).product();
                mass.push((th, ws.iter().enumerate().map(|(i, &w)| w * nw.pow(i as u32)).sum::<usize>(), pz * pt * pw));
            }
        }
        tuple_probs.push(pz);
        meta_posteriors.push(meta);
    }
    let per_theta = nw.pow(n as u32);
    let mut table = vec![0.0; tuples.len() * cols];
    for (idx, (th, wcol, p)) in mass.into_iter().enumerate() {
        let row = idx / cols;
        table[row * cols + th * per_theta + wcol] = p;
    }
    let joint = JointTable::from_counts(tuples.len(), cols, table)?;
    Ok(JointEnumeration {
        n,
        m,
        datasets,
        dataset_probs,
        tuples,
        tuple_probs,
        meta_posteriors,
        joint,
        thetas: nt,
        hypotheses: nw,
    })
}

/// `D(P_{Z_{1:n}} ‖ Q_{Z_{1:n}})` over unlabeled dataset tuples, enumerated
/// over the full tuple space.
pub fn dataset_kl(
    trainenv: &TaskEnvironment,
    testenv: &TaskEnvironment,
    n: usize,
    m: usize,
) -> Result<f64, SupervisedError> {
    let datasets = all_datasets(trainenv.alphabet(), m)?;
    let p1: Vec<f64> = datasets.iter().map(|z| trainenv.dataset_prob(z)).collect();
    let q1: Vec<f64> = datasets.iter().map(|z| testenv.dataset_prob(z)).collect();
    let tuples = cartesian(datasets.len(), n);
    let p: Vec<f64> = tuples.iter().map(|t| t.iter().map(|&k| p1[k]).product()).collect();
    let q: Vec<f64> = tuples.iter().map(|t| t.iter().map(|&k| q1[k]).product()).collect();
    Ok(kl_slices(&p, &q)?)
}

/// `D(P_Z ‖ Q_Z)` for one dataset of size `m`.
pub fn single_dataset_kl(trainenv: &TaskEnvironment, testenv: &TaskEnvironment, m: usize) -> Result<f64, SupervisedError> {
    dataset_kl(trainenv, testenv, 1, m)
}

/// `sqrt(2σ²(I + KL) / (n·m))`.
pub fn thm1_bound(mi_joint: f64, kl_datasets: f64, sigma: f64, n: usize, m: usize) -> f64 {
    (2.0 * sigma * sigma * (mi_joint + kl_datasets) / (n * m) as f64).sqrt()
}

/// `E_{θ, Z_{1:n}}[L_Z(θ) − L_𝒰(θ)]`, exactly.
pub fn ood_gap_exact(
    trainenv: &TaskEnvironment,
    testenv: &TaskEnvironment,
    n: usize,
    m: usize,
    spec: &GibbsLearnerSpec,
) -> Result<f64, SupervisedError> {
    let joint = exact_joint_enumeration(trainenv, n, m, spec)?;
    ood_gap_from_enumeration(&joint, trainenv, testenv, spec)
}

fn ood_gap_from_enumeration(
    joint: &JointEnumeration,
    trainenv: &TaskEnvironment,
    testenv: &TaskEnvironment,
    spec: &GibbsLearnerSpec,
) -> Result<f64, SupervisedError> {
    let task = trainenv.shared_loss()?;
    let nt = spec.theta_grid.len();
    let pop: Vec<f64> = (0..nt)
        .map(|th| population_meta_risk(th, testenv, joint.m, spec))
        .collect::<Result<_, _>>()?;
    let adapted: Vec<Vec<f64>> = (0..nt)
        .map(|th| {
            joint
                .datasets
                .iter()
                .map(|z| adapted_empirical_loss(th, z, task, spec))
                .collect()
        })
        .collect();
    let mut gap = 0.0;
    for ((tuple, pz), post) in joint.tuples.iter().zip(&joint.tuple_probs).zip(&joint.meta_posteriors) {
        for th in 0..nt {
            let emp = tuple.iter().map(|&k| adapted[th][k]).sum::<f64>() / joint.n as f64;
            gap += pz * post[th] * (emp - pop[th]);
        }
    }
    Ok(gap)
}

/// Both sides of the mutual-information OOD bound for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub gap: f64,
    pub mi_joint: f64,
    pub kl_datasets: f64,
    pub bound: f64,
    pub holds: bool,
    /// `[mismatch, environment, task]` terms, single-task environments only.
    pub decomposition: Option<[f64; 3]>,
}

pub fn theorem1_check(
    trainenv: &TaskEnvironment,
    testenv: &TaskEnvironment,
    n: usize,
    m: usize,
    spec: &GibbsLearnerSpec,
) -> Result<Theorem1Report, SupervisedError> {
    if testenv.shared_loss()?.loss_table != trainenv.shared_loss()?.loss_table {
        return Err(SupervisedError::LossTablesDiffer);
    }
    let joint = exact_joint_enumeration(trainenv, n, m, spec)?;
    let gap = ood_gap_from_enumeration(&joint, trainenv, testenv, spec)?;
    let mi_joint = joint.mi_joint();
    let kl_datasets = dataset_kl(trainenv, testenv, n, m)?;
    let bound = thm1_bound(mi_joint, kl_datasets, LOSS_SIGMA, n, m);
    let decomposition = if trainenv.tasks.len() == 1 && testenv.tasks.len() == 1 {
        let s2 = 2.0 * LOSS_SIGMA * LOSS_SIGMA;
        let nm = (n * m) as f64;
        let d = kl_slices(
            trainenv.tasks[0].sample_dist.probs(),
            testenv.tasks[0].sample_dist.probs(),
        )?;
        let task_cmi: f64 = (0..n).map(|i| joint.task_cmi(i)).sum();
        Some([(s2 * d).sqrt(), (s2 * joint.mi_theta() / nm).sqrt(), (s2 * task_cmi / nm).sqrt()])
    } else {
        None
    };
    Ok(Theorem1Report {
        gap,
        mi_joint,
        kl_datasets,
        bound,
        holds: gap <= bound + 1e-9,
        decomposition,
    })
}

/// A dataset tagged with the task that generated it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub task: usize,
    pub samples: Vec<usize>,
}

/// `n` pairs of independent `(task, dataset)` draws plus Rademacher selectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperSample {
    pub pairs: Vec<(LabeledDataset, LabeledDataset)>,
    pub signs: Vec<i8>,
}

impl SuperSample {
    pub fn n(&self) -> usize {
        self.pairs.len()
    }

    /// Pairs with at least one member drawn from `target`.
    pub fn target_count(&self, target: usize) -> usize {
        self.pairs
            .iter()
            .filter(|(p, q)| p.task == target || q.task == target)
            .count()
    }
}

fn draw_labeled<R: Rng + ?Sized>(env: &TaskEnvironment, m: usize, rng: &mut R) -> LabeledDataset {
    let task = sample_index(env.weights.probs(), rng);
    LabeledDataset {
        task,
        samples: env.tasks[task].draw_dataset(m, rng),
    }
}

/// `2n` i.i.d. draws arranged in pairs; signs come from an independent stream.
pub fn build_supersample(env: &TaskEnvironment, n: usize, m: usize, seed: u64) -> SuperSample {
    let mut data_rng = rng_from_seed(derive_seed(seed, 0));
    let mut sign_rng = rng_from_seed(derive_seed(seed, 1));
    let pairs = (0..n)
        .map(|_| (draw_labeled(env, m, &mut data_rng), draw_labeled(env, m, &mut data_rng)))
        .collect();
    let signs = (0..n).map(|_| rademacher(&mut sign_rng)).collect();
    SuperSample { pairs, signs }
}

/// Per-θ adapted empirical losses of both members of every pair, so that the
/// selector-dependent quantities can be recomputed cheaply for any sign vector.
struct PairLosses {
    /// `[i][θ]` for the `+` and `−` members.
    plus: Vec<Vec<f64>>,
    minus: Vec<Vec<f64>>,
    plus_task: Vec<usize>,
    minus_task: Vec<usize>,
}

impl PairLosses {
    fn new(env: &TaskEnvironment, ss: &SuperSample, spec: &GibbsLearnerSpec) -> Self {
        let nt = spec.theta_grid.len();
        let losses = |d: &LabeledDataset| -> Vec<f64> {
            (0..nt)
                .map(|th| adapted_empirical_loss(th, &d.samples, &env.tasks[d.task], spec))
                .collect()
        };
        PairLosses {
            plus: ss.pairs.iter().map(|(p, _)| losses(p)).collect(),
            minus: ss.pairs.iter().map(|(_, q)| losses(q)).collect(),
            plus_task: ss.pairs.iter().map(|(p, _)| p.task).collect(),
            minus_task: ss.pairs.iter().map(|(_, q)| q.task).collect(),
        }
    }

    fn meta_posterior(&self, signs: &[i8], spec: &GibbsLearnerSpec) -> Vec<f64> {
        let n = signs.len() as f64;
        let risks: Vec<f64> = (0..spec.theta_grid.len())
            .map(|th| {
                signs
                    .iter()
                    .enumerate()
                    .map(|(i, &u)| if u > 0 { self.plus[i][th] } else { self.minus[i][th] })
                    .sum::<f64>()
                    / n
            })
            .collect();
        meta_posterior_from_risks(&risks, spec)
    }

    /// `f_i = 1{τ⁻=τ̂} E L(W⁻, Z⁻) − 1{τ⁺=τ̂} E L(W⁺, Z⁺)`, averaged over
    /// `θ ~ P(θ | selected datasets)`.
    fn f_values(&self, signs: &[i8], target: usize, spec: &GibbsLearnerSpec) -> Vec<f64> {
        let post = self.meta_posterior(signs, spec);
        (0..signs.len())
            .map(|i| {
                let ind = |t: usize| if t == target { 1.0 } else { 0.0 };
                post.iter()
                    .enumerate()
                    .map(|(th, p)| {
                        p * (ind(self.minus_task[i]) * self.minus[i][th] - ind(self.plus_task[i]) * self.plus[i][th])
                    })
                    .sum()
            })
            .collect()
    }
}

/// `(1/n_τ̂) Σ_i [selected − held-out]` for one super-sample and sign vector,
/// or `None` when no pair touches the target.
pub fn subtask_gap_for_signs(
    env: &TaskEnvironment,
    ss: &SuperSample,
    signs: &[i8],
    target: usize,
    spec: &GibbsLearnerSpec,
) -> Option<f64> {
    let n_target = ss.target_count(target);
    if n_target == 0 {
        return None;
    }
    let losses = PairLosses::new(env, ss, spec);
    Some(signed_gap(&losses, signs, target, spec, n_target))
}

fn signed_gap(losses: &PairLosses, signs: &[i8], target: usize, spec: &GibbsLearnerSpec, n_target: usize) -> f64 {
    let f = losses.f_values(signs, target, spec);
    f.iter().zip(signs).map(|(fi, &u)| -(u as f64) * fi).sum::<f64>() / n_target as f64
}

/// Monte Carlo settings shared by the subtask estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubtaskConfig {
    pub n: usize,
    pub m: usize,
    pub trials: usize,
    /// Sign vectors drawn per super-sample for the conditional-MI estimate.
    pub sign_resamples: usize,
    pub bins: usize,
}

impl Default for SubtaskConfig {
    fn default() -> Self {
        SubtaskConfig {
            n: 4,
            m: 2,
            trials: 200,
            sign_resamples: 128,
            bins: crate::info::DEFAULT_BINS,
        }
    }
}

/// Estimate and bound from the same super-sample draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskReport {
    pub estimate: Estimate,
    pub bound: Estimate,
    pub degenerate_draws: usize,
    pub total_draws: usize,
    pub holds: bool,
}

impl SubtaskReport {
    pub fn degenerate_frequency(&self) -> f64 {
        self.degenerate_draws as f64 / self.total_draws.max(1) as f64
    }
}

struct DrawOutcome {
    gap: f64,
    bound: f64,
}

fn subtask_draw(
    env: &TaskEnvironment,
    target: usize,
    spec: &GibbsLearnerSpec,
    cfg: &SubtaskConfig,
    seed: u64,
    with_bound: bool,
) -> Option<DrawOutcome> {
    let ss = build_supersample(env, cfg.n, cfg.m, seed);
    let n_target = ss.target_count(target);
    if n_target == 0 {
        return None;
    }
    let losses = PairLosses::new(env, &ss, spec);
    let gap = signed_gap(&losses, &ss.signs, target, spec, n_target);
    let bound = if with_bound {
        let mut rng: SimRng = rng_from_seed(derive_seed(seed, 2));
        let mut pairs: Vec<Vec<(i8, f64)>> = vec![Vec::with_capacity(cfg.sign_resamples); cfg.n];
        for _ in 0..cfg.sign_resamples {
            let signs: Vec<i8> = (0..cfg.n).map(|_| rademacher(&mut rng)).collect();
            let f = losses.f_values(&signs, target, spec);
            for (i, fi) in f.into_iter().enumerate() {
                pairs[i].push((signs[i], fi));
            }
        }
        let s2 = 2.0 * LOSS_SIGMA * LOSS_SIGMA;
        pairs
            .iter()
            .map(|p| (s2 * binned_mi_binary(p, cfg.bins) / cfg.m as f64).sqrt())
            .sum::<f64>()
            / n_target as f64
    } else {
        0.0
    };
    Some(DrawOutcome { gap, bound })
}

fn subtask_run(
    env: &TaskEnvironment,
    target: usize,
    spec: &GibbsLearnerSpec,
    cfg: &SubtaskConfig,
    seed: u64,
    with_bound: bool,
) -> Result<SubtaskReport, SupervisedError> {
    spec.validate()?;
    let mut gap = MeanAccumulator::default();
    let mut bound = MeanAccumulator::default();
    let mut degenerate = 0;
    for t in 0..cfg.trials {
        match subtask_draw(env, target, spec, cfg, derive_seed(seed, t as u64), with_bound) {
            Some(o) => {
                gap.push(o.gap);
                bound.push(o.bound);
            }
            None => degenerate += 1,
        }
    }
    if gap.count() == 0 {
        return Err(SupervisedError::AllDrawsDegenerate(cfg.trials));
    }
    let (estimate, bound) = (gap.estimate(), bound.estimate());
    Ok(SubtaskReport {
        estimate,
        bound,
        degenerate_draws: degenerate,
        total_draws: cfg.trials,
        holds: estimate.mean <= bound.mean + 3.0 * estimate.se.hypot(bound.se),
    })
}

/// Monte Carlo subtask generalization gap; draws that miss the target are
/// skipped and counted.
pub fn gen_sub_estimate(
    env: &TaskEnvironment,
    target: usize,
    spec: &GibbsLearnerSpec,
    cfg: &SubtaskConfig,
    seed: u64,
) -> Result<SubtaskReport, SupervisedError> {
    subtask_run(env, target, spec, cfg, seed, false)
}

/// Estimate and conditional-MI bound over the same draws.
pub fn thm2_bound(
    env: &TaskEnvironment,
    target: usize,
    spec: &GibbsLearnerSpec,
    cfg: &SubtaskConfig,
    seed: u64,
) -> Result<SubtaskReport, SupervisedError> {
    subtask_run(env, target, spec, cfg, seed, true)
}

/// Random tiny instance: two tasks on a binary alphabet sharing one 3×2 loss
/// table, independent train/test weights, 3-point grids.
pub fn random_tiny_instance<R: Rng + ?Sized>(
    rng: &mut R,
) -> Result<(TaskEnvironment, TaskEnvironment, GibbsLearnerSpec), SupervisedError> {
    let loss: Vec<Vec<f64>> = (0..3).map(|_| vec![rng.random(), rng.random()]).collect();
    let tasks = (0..2)
        .map(|_| FiniteTask::new(DiscreteDistribution::new(random_simplex(2, rng))?, loss.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let train = TaskEnvironment::new(tasks.clone(), DiscreteDistribution::new(random_simplex(2, rng))?)?;
    let test = TaskEnvironment::new(tasks, DiscreteDistribution::new(random_simplex(2, rng))?)?;
    let spec = GibbsLearnerSpec::new(
        3,
        3,
        rng.random_range(0.1..5.0),
        rng.random_range(0.1..20.0),
        rng.random_range(0.0..3.0),
    )?;
    Ok((train, test, spec))
}

/// Random subtask instance: `tasks` tasks with their own loss tables.
pub fn random_subtask_instance<R: Rng + ?Sized>(
    tasks: usize,
    alphabet: usize,
    hypotheses: usize,
    rng: &mut R,
) -> Result<(TaskEnvironment, GibbsLearnerSpec), SupervisedError> {
    let tasks = (0..tasks)
        .map(|_| {
            let loss = (0..hypotheses)
                .map(|_| (0..alphabet).map(|_| rng.random()).collect())
                .collect();
            FiniteTask::new(DiscreteDistribution::new(random_simplex(alphabet, rng))?, loss)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let k = tasks.len();
    let env = TaskEnvironment::new(tasks, DiscreteDistribution::new(random_simplex(k, rng))?)?;
    let spec = GibbsLearnerSpec::new(
        hypotheses,
        3,
        rng.random_range(0.5..5.0),
        rng.random_range(1.0..30.0),
        rng.random_range(0.0..3.0),
    )?;
    Ok((env, spec))
}
