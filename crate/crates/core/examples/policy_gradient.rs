//! REINFORCE on a small tabular MDP: the sampled estimator, its exact
//! expectation, the closed-form gradient and finite differences.

use metagen::mdp::{
    exact_policy_gradient, exact_return, expected_reinforce_gradient, finite_difference_gradient, sampled_gradient,
    value_iteration_finite_horizon, SoftmaxPolicy, TabularMDP,
};
use metagen::rng::rng_from_seed;
use metagen::stats::MeanAccumulator;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = rng_from_seed(21);
    let mdp = TabularMDP::random(2, 2, 0.9, 2, &mut rng)?;
    let logits = vec![0.3, -0.2, 0.0, 0.5];
    let policy = SoftmaxPolicy::for_mdp(&mdp, &logits)?;

    let exact = exact_policy_gradient(&mdp, &policy)?;
    let mean = expected_reinforce_gradient(&mdp, &policy)?;
    let fd = finite_difference_gradient(&mdp, &logits, 1e-5)?;

    let mut sampled: Vec<MeanAccumulator> = (0..exact.len()).map(|_| MeanAccumulator::default()).collect();
    for _ in 0..20_000 {
        for (acc, g) in sampled.iter_mut().zip(sampled_gradient(&mdp, &policy, &mut rng)?) {
            acc.push(g);
        }
    }

    println!("{:>3} {:>12} {:>12} {:>12} {:>20}", "i", "exact", "E[REINFORCE]", "finite diff", "20k samples");
    for i in 0..exact.len() {
        let e = sampled[i].estimate();
        println!(
            "{i:>3} {:>12.8} {:>12.8} {:>12.8} {:>12.5} ± {:.5}",
            exact[i], mean[i], fd[i], e.mean, e.se
        );
    }

    // plain gradient ascent on the exact gradient
    let mut theta = logits.clone();
    for _ in 0..200 {
        let g = exact_policy_gradient(&mdp, &SoftmaxPolicy::for_mdp(&mdp, &theta)?)?;
        theta.iter_mut().zip(g).for_each(|(t, g)| *t += 2.0 * g);
    }
    let best = value_iteration_finite_horizon(&mdp).value_from_initial(&mdp);
    println!("\nJ(start) = {:.5}", exact_return(&mdp, &policy)?);
    println!("J(after 200 ascent steps) = {:.5}", exact_return(&mdp, &SoftmaxPolicy::for_mdp(&mdp, &theta)?)?);
    println!("optimal = {best:.5}");
    Ok(())
}
