//! Randomized checks of the information identities and inequalities the
//! bounds are built on.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::info::{
    conditional_mutual_information, dv_gap, gaussian_entropy, kl_discrete, log_det_ratio_term, mutual_information,
    CovarianceEstimate, DiscreteDistribution, InfoError, JointTable,
};
use crate::mdp::random_simplex;
use crate::rng::{rng_from_seed, standard_normal, SimRng};

pub const DECOMPOSITION_TOLERANCE: f64 = 1e-10;
pub const DV_DOMINANCE_TOLERANCE: f64 = 1e-12;
pub const DV_EQUALITY_TOLERANCE: f64 = 1e-9;
pub const DPI_TOLERANCE: f64 = 1e-10;

const LOG_DET_SCALES: [f64; 5] = [0.0, 0.1, 1.0, 3.0, 10.0];

/// Worst observed residual of each check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub cases: usize,
    /// `max |D(P_XY ‖ Q_X⊗P_Y) − I(X;Y) − D(P_X ‖ Q_X)|`.
    pub decomposition_error: f64,
    /// `max (dv_gap − KL)`.
    pub dv_excess: f64,
    /// `max |dv_gap(f = ln p/q) − KL|`.
    pub dv_equality_error: f64,
    /// `max (I(X;Z) − min(I(X;Y), I(Y;Z)))` over Markov chains.
    pub dpi_violation: f64,
    /// `min (h_gauss(σ²) − ln(2√3 σ))`.
    pub entropy_margin: f64,
    /// Largest decrease of `log_det_ratio_term` along increasing scales.
    pub log_det_decrease: f64,
    /// Smallest MI or CMI seen.
    pub min_information: f64,
    pub passed: bool,
}

fn dist(n: usize, rng: &mut SimRng) -> DiscreteDistribution {
    DiscreteDistribution::new(random_simplex(n, rng)).expect("simplex draw")
}

fn stochastic(rows: usize, cols: usize, rng: &mut SimRng) -> Vec<Vec<f64>> {
    (0..rows).map(|_| random_simplex(cols, rng)).collect()
}

fn joint_from(px: &[f64], kernel: &[Vec<f64>]) -> Result<JointTable, InfoError> {
    let rows: Vec<Vec<f64>> = px
        .iter()
        .zip(kernel)
        .map(|(p, row)| row.iter().map(|k| p * k).collect())
        .collect();
    JointTable::from_rows(&rows)
}

fn compose(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|k| row.iter().zip(b).map(|(x, brow)| x * brow[k]).sum())
                .collect()
        })
        .collect()
}

/// `D(P_XY ‖ Q_X ⊗ P_Y) − I(X;Y) − D(P_X ‖ Q_X)`.
pub fn decomposition_residual(pxy: &JointTable, qx: &DiscreteDistribution) -> Result<f64, InfoError> {
    let py = DiscreteDistribution::new(pxy.col_marginal())?;
    let reference = JointTable::product(qx, &py);
    let lhs = kl_discrete(&pxy.as_distribution(), &reference.as_distribution())?;
    let px = DiscreteDistribution::new(pxy.row_marginal())?;
    Ok(lhs - mutual_information(pxy) - kl_discrete(&px, qx)?)
}

/// Runs `cases` random instances of every check from one seed.
pub fn lemma_suite(cases: usize, seed: u64) -> Result<LemmaReport, InfoError> {
    let mut rng = rng_from_seed(seed);
    let mut r = LemmaReport {
        cases,
        decomposition_error: 0.0,
        dv_excess: f64::NEG_INFINITY,
        dv_equality_error: 0.0,
        dpi_violation: f64::NEG_INFINITY,
        entropy_margin: f64::INFINITY,
        log_det_decrease: 0.0,
        min_information: f64::INFINITY,
        passed: false,
    };
    for _ in 0..cases {
        let (nx, ny, nz) = (rng.random_range(2..=5), rng.random_range(2..=5), rng.random_range(2..=5));

        let pxy = JointTable::new(nx, ny, random_simplex(nx * ny, &mut rng))?;
        let qx = dist(nx, &mut rng);
        r.decomposition_error = r.decomposition_error.max(decomposition_residual(&pxy, &qx)?.abs());

        let p = dist(nx, &mut rng);
        let q = dist(nx, &mut rng);
        let kl = kl_discrete(&p, &q)?;
        let f: Vec<f64> = (0..nx).map(|_| 2.0 * standard_normal(&mut rng)).collect();
        r.dv_excess = r.dv_excess.max(dv_gap(&p, &q, &f)? - kl);
        let opt: Vec<f64> = p.probs().iter().zip(q.probs()).map(|(a, b)| (a / b).ln()).collect();
        r.dv_equality_error = r.dv_equality_error.max((dv_gap(&p, &q, &opt)? - kl).abs());

        let px = dist(nx, &mut rng);
        let k1 = stochastic(nx, ny, &mut rng);
        let k2 = stochastic(ny, nz, &mut rng);
        let xy = joint_from(px.probs(), &k1)?;
        let xz = joint_from(px.probs(), &compose(&k1, &k2))?;
        let yz = joint_from(&xy.col_marginal(), &k2)?;
        let (ixy, ixz, iyz) = (mutual_information(&xy), mutual_information(&xz), mutual_information(&yz));
        r.dpi_violation = r.dpi_violation.max(ixz - ixy.min(iyz));
        let family: Vec<(f64, JointTable)> = (0..ny)
            .map(|_| Ok((rng.random::<f64>() + 0.01, JointTable::new(nx, nz, random_simplex(nx * nz, &mut rng))?)))
            .collect::<Result<_, InfoError>>()?;
        let total: f64 = family.iter().map(|(w, _)| w).sum();
        let family: Vec<_> = family.into_iter().map(|(w, j)| (w / total, j)).collect();
        let cmi = conditional_mutual_information(&family)?;
        r.min_information = r.min_information.min(ixy).min(ixz).min(iyz).min(cmi);

        let sigma = (rng.random_range(-4.0..3.0f64)).exp();
        let h = gaussian_entropy(&CovarianceEstimate::from_diagonal(&[sigma * sigma]))?;
        r.entropy_margin = r.entropy_margin.min(h - (2.0 * 3f64.sqrt() * sigma).ln());

        let d = rng.random_range(1..=5);
        let k = rng.random_range(1..=d + 2);
        let b = DMatrix::from_fn(d, k, |_, _| standard_normal(&mut rng));
        let cov = CovarianceEstimate::new(&b * b.transpose(), k)?;
        let terms: Vec<f64> = LOG_DET_SCALES.iter().map(|&s| log_det_ratio_term(s, &cov)).collect();
        for w in terms.windows(2) {
            r.log_det_decrease = r.log_det_decrease.max(w[0] - w[1]);
        }
    }
    r.passed = r.decomposition_error <= DECOMPOSITION_TOLERANCE
        && r.dv_excess <= DV_DOMINANCE_TOLERANCE
        && r.dv_equality_error <= DV_EQUALITY_TOLERANCE
        && r.dpi_violation <= DPI_TOLERANCE
        && r.entropy_margin > 0.0
        && r.log_det_decrease <= 1e-12
        && r.min_information >= -1e-12;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let r = lemma_suite(200, 1).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.dv_excess < 0.0);
    }

    #[test]
    fn suite_is_deterministic() {
        assert_eq!(lemma_suite(20, 9).unwrap(), lemma_suite(20, 9).unwrap());
    }

    #[test]
    fn residual_is_zero_when_reference_is_marginal() {
        let pxy = JointTable::from_rows(&[vec![0.1, 0.2], vec![0.3, 0.4]]).unwrap();
        let qx = DiscreteDistribution::new(pxy.row_marginal()).unwrap();
        assert!(decomposition_residual(&pxy, &qx).unwrap().abs() < 1e-15);
    }
}
