//! Exact information measures on finite supports, Gaussian log-determinant
//! terms, and the plug-in estimators used by the Monte Carlo bound checks.
//!
//! Every quantity is in nats and uses the `0 · ln 0 = 0` convention.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the total mass of a probability vector or joint table.
pub const MASS_TOLERANCE: f64 = 1e-12;
/// Diagonal jitter for Cholesky factorizations of sample covariances.
pub const CHOLESKY_JITTER: f64 = 1e-9;
/// Default number of equal-width bins for [`binned_mi_binary`].
pub const DEFAULT_BINS: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InfoError {
    #[error("distribution is empty")]
    EmptySupport,
    #[error("negative or non-finite mass {value} at index {index}")]
    InvalidMass { index: usize, value: f64 },
    #[error("total mass {total} differs from 1")]
    NotNormalized { total: f64 },
    #[error("support sizes differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("p[{index}] > 0 while q[{index}] = 0")]
    AbsoluteContinuityViolation { index: usize },
    #[error("covariance is not positive definite even with jitter")]
    SingularCovariance,
    #[error("need at least 2 samples, got {0}")]
    InsufficientSamples(usize),
    #[error("matrix is not square or not symmetric")]
    NotSymmetric,
}

/// A probability vector over `0..len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DiscreteDistribution {
    probs: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, InfoError> {
        if probs.is_empty() {
            return Err(InfoError::EmptySupport);
        }
        check_masses(&probs)?;
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(InfoError::NotNormalized { total });
        }
        Ok(DiscreteDistribution { probs })
    }

    /// Normalize nonnegative weights.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self, InfoError> {
        if weights.is_empty() {
            return Err(InfoError::EmptySupport);
        }
        check_masses(&weights)?;
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(InfoError::NotNormalized { total });
        }
        Ok(DiscreteDistribution {
            probs: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn uniform(len: usize) -> Result<Self, InfoError> {
        Self::from_weights(vec![1.0; len])
    }

    pub fn point_mass(len: usize, index: usize) -> Result<Self, InfoError> {
        let mut w = vec![0.0; len];
        *w.get_mut(index).ok_or(InfoError::EmptySupport)? = 1.0;
        Self::new(w)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, i: usize) -> f64 {
        self.probs[i]
    }

    pub fn entropy(&self) -> f64 {
        -self.probs.iter().map(|&p| xlnx(p)).sum::<f64>()
    }
}

impl TryFrom<Vec<f64>> for DiscreteDistribution {
    type Error = InfoError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        DiscreteDistribution::new(v)
    }
}

impl From<DiscreteDistribution> for Vec<f64> {
    fn from(d: DiscreteDistribution) -> Self {
        d.probs
    }
}

fn check_masses(v: &[f64]) -> Result<(), InfoError> {
    match v.iter().position(|x| !x.is_finite() || *x < 0.0) {
        Some(index) => Err(InfoError::InvalidMass {
            index,
            value: v[index],
        }),
        None => Ok(()),
    }
}

fn xlnx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// Joint probability table over `X × Y`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTable {
    rows: usize,
    cols: usize,
    mass: Vec<f64>,
}

impl JointTable {
    pub fn new(rows: usize, cols: usize, mass: Vec<f64>) -> Result<Self, InfoError> {
        if rows == 0 || cols == 0 {
            return Err(InfoError::EmptySupport);
        }
        if mass.len() != rows * cols {
            return Err(InfoError::LengthMismatch {
                left: mass.len(),
                right: rows * cols,
            });
        }
        check_masses(&mass)?;
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(InfoError::NotNormalized { total });
        }
        Ok(JointTable { rows, cols, mass })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, InfoError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(InfoError::LengthMismatch {
                left: cols,
                right: rows.iter().map(Vec::len).max().unwrap_or(0),
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Normalize a nonnegative count or weight table.
    pub fn from_counts(rows: usize, cols: usize, counts: Vec<f64>) -> Result<Self, InfoError> {
        let total: f64 = counts.iter().sum();
        if total <= 0.0 {
            return Err(InfoError::NotNormalized { total });
        }
        Self::new(rows, cols, counts.into_iter().map(|c| c / total).collect())
    }

    /// Product table `P_X ⊗ P_Y`.
    pub fn product(px: &DiscreteDistribution, py: &DiscreteDistribution) -> Self {
        let mass = px
            .probs()
            .iter()
            .flat_map(|&a| py.probs().iter().map(move |&b| a * b))
            .collect();
        JointTable {
            rows: px.len(),
            cols: py.len(),
            mass,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.mass[x * self.cols + y]
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn row_marginal(&self) -> Vec<f64> {
        self.mass.chunks(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_marginal(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.cols];
        for row in self.mass.chunks(self.cols) {
            for (acc, v) in m.iter_mut().zip(row) {
                *acc += v;
            }
        }
        m
    }

    pub fn as_distribution(&self) -> DiscreteDistribution {
        DiscreteDistribution {
            probs: self.mass.clone(),
        }
    }
}

/// `D(p ‖ q) = Σ p_i ln(p_i / q_i)`.
pub fn kl_discrete(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64, InfoError> {
    kl_slices(p.probs(), q.probs())
}

pub(crate) fn kl_slices(p: &[f64], q: &[f64]) -> Result<f64, InfoError> {
    if p.len() != q.len() {
        return Err(InfoError::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    let mut d = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(InfoError::AbsoluteContinuityViolation { index: i });
            }
            d += pi * (pi / qi).ln();
        }
    }
    Ok(d.max(0.0))
}

/// `I(X;Y) = D(P_XY ‖ P_X ⊗ P_Y)`.
pub fn mutual_information(joint: &JointTable) -> f64 {
    let px = joint.row_marginal();
    let py = joint.col_marginal();
    let mut i = 0.0;
    for x in 0..joint.rows {
        for y in 0..joint.cols {
            let pxy = joint.get(x, y);
            if pxy > 0.0 {
                i += pxy * (pxy / (px[x] * py[y])).ln();
            }
        }
    }
    i.max(0.0)
}

/// `I(X;Y|Z) = Σ_z w_z I(X;Y | Z=z)`.
pub fn conditional_mutual_information(family: &[(f64, JointTable)]) -> Result<f64, InfoError> {
    let weights = DiscreteDistribution::new(family.iter().map(|(w, _)| *w).collect())?;
    Ok(weights
        .probs()
        .iter()
        .zip(family)
        .map(|(w, (_, j))| w * mutual_information(j))
        .sum())
}

/// Donsker–Varadhan lower bound `E_p[f] − ln E_q[e^f]` for a witness `f`.
pub fn dv_gap(p: &DiscreteDistribution, q: &DiscreteDistribution, f: &[f64]) -> Result<f64, InfoError> {
    if p.len() != q.len() || f.len() != p.len() {
        return Err(InfoError::LengthMismatch {
            left: p.len(),
            right: q.len().min(f.len()),
        });
    }
    if let Some(index) = p
        .probs()
        .iter()
        .zip(q.probs())
        .position(|(&pi, &qi)| pi > 0.0 && qi <= 0.0)
    {
        return Err(InfoError::AbsoluteContinuityViolation { index });
    }
    let ep: f64 = p
        .probs()
        .iter()
        .zip(f)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(pi, fi)| pi * fi)
        .sum();
    // log-sum-exp over the support of q
    let fmax = q
        .probs()
        .iter()
        .zip(f)
        .filter(|(&qi, _)| qi > 0.0)
        .map(|(_, &fi)| fi)
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = q
        .probs()
        .iter()
        .zip(f)
        .filter(|(&qi, _)| qi > 0.0)
        .map(|(qi, fi)| qi * (fi - fmax).exp())
        .sum();
    Ok(ep - (fmax + s.ln()))
}

/// Symmetric covariance matrix with the number of samples behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    matrix: DMatrix<f64>,
    sample_count: usize,
}

impl CovarianceEstimate {
    pub fn new(matrix: DMatrix<f64>, sample_count: usize) -> Result<Self, InfoError> {
        if !matrix.is_square() {
            return Err(InfoError::NotSymmetric);
        }
        let scale = matrix.amax().max(1.0);
        for i in 0..matrix.nrows() {
            for j in 0..i {
                if (matrix[(i, j)] - matrix[(j, i)]).abs() > 1e-10 * scale {
                    return Err(InfoError::NotSymmetric);
                }
            }
        }
        Ok(CovarianceEstimate {
            matrix,
            sample_count,
        })
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        CovarianceEstimate {
            matrix: DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(diag)),
            sample_count: 0,
        }
    }

    pub fn identity(d: usize) -> Self {
        CovarianceEstimate {
            matrix: DMatrix::identity(d, d),
            sample_count: 0,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }
}

/// `ln det` of a symmetric positive definite matrix via Cholesky; retries once
/// with [`CHOLESKY_JITTER`] on the diagonal.
pub fn log_det_spd(m: &DMatrix<f64>) -> Result<f64, InfoError> {
    let chol = m.clone().cholesky().or_else(|| {
        let d = m.nrows();
        (m + DMatrix::identity(d, d) * CHOLESKY_JITTER).cholesky()
    });
    let l = chol.ok_or(InfoError::SingularCovariance)?;
    Ok(2.0 * l.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>())
}

/// Differential entropy of `N(0, cov)`: `(d/2) ln(2πe) + ½ ln det(cov)`.
pub fn gaussian_entropy(cov: &CovarianceEstimate) -> Result<f64, InfoError> {
    let d = cov.dim() as f64;
    let ld = log_det_spd(cov.matrix())?;
    Ok(0.5 * d * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + 0.5 * ld)
}

/// `ln det(scale · cov + I)`, the per-step information term of a noisy
/// gradient update with `scale = rate² / noise_variance`.
pub fn log_det_ratio_term(scale: f64, cov: &CovarianceEstimate) -> f64 {
    let d = cov.dim();
    if d == 0 || scale == 0.0 {
        return 0.0;
    }
    let m = cov.matrix() * scale + DMatrix::identity(d, d);
    match log_det_spd(&m) {
        Ok(v) => v.max(0.0),
        // scale·cov + I is PD for PSD cov; a failure means cov was not PSD.
        Err(_) => f64::NAN,
    }
}

/// Unbiased sample covariance of the rows of a `k × d` sample matrix.
pub fn sample_covariance(samples: &[Vec<f64>]) -> Result<CovarianceEstimate, InfoError> {
    let k = samples.len();
    if k < 2 {
        return Err(InfoError::InsufficientSamples(k));
    }
    let d = samples[0].len();
    if let Some(bad) = samples.iter().find(|r| r.len() != d) {
        return Err(InfoError::LengthMismatch {
            left: d,
            right: bad.len(),
        });
    }
    let mut mean = vec![0.0; d];
    for row in samples {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= k as f64);
    let mut cov = DMatrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for row in samples {
        for ((c, x), m) in centered.iter_mut().zip(row).zip(&mean) {
            *c = x - m;
        }
        for i in 0..d {
            if centered[i] == 0.0 {
                continue;
            }
            for j in i..d {
                cov[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    let denom = (k - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(CovarianceEstimate {
        matrix: cov,
        sample_count: k,
    })
}

/// Plug-in MI between a ±1 sign and an equal-width-binned scalar.
///
/// Bin edges partition `[min, max]` of the observed scalars; a constant column
/// collapses to a single bin.
pub fn binned_mi_binary(pairs: &[(i8, f64)], bins: usize) -> f64 {
    if pairs.len() < 2 {
        return 0.0;
    }
    let bins = bins.max(1);
    let (lo, hi) = pairs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, x)| {
            (lo.min(x), hi.max(x))
        });
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0.0; 2 * bins];
    for &(sign, x) in pairs {
        let b = if width > 0.0 {
            (((x - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        let row = usize::from(sign > 0);
        counts[row * bins + b] += 1.0;
    }
    match JointTable::from_counts(2, bins, counts) {
        Ok(j) => mutual_information(&j),
        Err(_) => 0.0,
    }
}

/// Plug-in MI between two discrete label sequences of equal length.
pub fn plugin_mi_labels(xs: &[u64], ys: &[u64]) -> f64 {
    use std::collections::{BTreeMap, HashMap};
    assert_eq!(xs.len(), ys.len());
    if xs.is_empty() {
        return 0.0;
    }
    let mut xi: HashMap<u64, usize> = HashMap::new();
    let mut yi: HashMap<u64, usize> = HashMap::new();
    // ordered so the summation order, and hence the result, is reproducible
    let mut cells: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (x, y) in xs.iter().zip(ys) {
        let nx = xi.len();
        let a = *xi.entry(*x).or_insert(nx);
        let ny = yi.len();
        let b = *yi.entry(*y).or_insert(ny);
        *cells.entry((a, b)).or_insert(0.0) += 1.0;
    }
    let n = xs.len() as f64;
    let mut px = vec![0.0; xi.len()];
    let mut py = vec![0.0; yi.len()];
    for (&(a, b), &c) in &cells {
        px[a] += c / n;
        py[b] += c / n;
    }
    cells
        .iter()
        .map(|(&(a, b), &c)| {
            let p = c / n;
            p * (p / (px[a] * py[b])).ln()
        })
        .sum::<f64>()
        .max(0.0)
}
