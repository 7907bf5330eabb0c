//! Exact discrete information measures and the randomized lemma suite.

use metagen::info::{
    dv_gap, kl_discrete, log_det_ratio_term, mutual_information, sample_covariance, DiscreteDistribution, JointTable,
};
use metagen::lemmas::lemma_suite;
use metagen::rng::{rng_from_seed, standard_normal};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let p = DiscreteDistribution::new(vec![0.75, 0.25])?;
    let q = DiscreteDistribution::new(vec![0.25, 0.75])?;
    let kl = kl_discrete(&p, &q)?;
    println!("KL(p || q)            = {kl:.6} nats");

    // any witness gives a lower bound, the log-ratio witness is tight
    let witness = [1.0, -1.0];
    let optimal: Vec<f64> = p.probs().iter().zip(q.probs()).map(|(a, b)| (a / b).ln()).collect();
    println!("DV gap, f = [1, -1]   = {:.6}", dv_gap(&p, &q, &witness)?);
    println!("DV gap, f = ln(p/q)   = {:.6}", dv_gap(&p, &q, &optimal)?);

    let coupled = JointTable::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.5]])?;
    let noisy = JointTable::from_rows(&[vec![0.4, 0.1], vec![0.1, 0.4]])?;
    println!("I(X;Y) copy           = {:.6}", mutual_information(&coupled));
    println!("I(X;Y) 20% flip       = {:.6}", mutual_information(&noisy));

    let mut rng = rng_from_seed(3);
    let samples: Vec<Vec<f64>> = (0..500)
        .map(|_| {
            let z = standard_normal(&mut rng);
            vec![z, 0.5 * z + 0.1 * standard_normal(&mut rng)]
        })
        .collect();
    let cov = sample_covariance(&samples)?;
    for scale in [0.1, 1.0, 10.0] {
        println!("ln det({scale:>4} Σ + I)   = {:.6}", log_det_ratio_term(scale, &cov));
    }

    let report = lemma_suite(200, 42)?;
    println!("\nlemma suite over {} random cases", report.cases);
    println!("  KL decomposition error   {:.2e}", report.decomposition_error);
    println!("  DV excess over KL        {:.2e}", report.dv_excess);
    println!("  DV equality error        {:.2e}", report.dv_equality_error);
    println!("  data-processing slack    {:.2e}", report.dpi_violation);
    println!("  passed                   {}", report.passed);
    Ok(())
}
