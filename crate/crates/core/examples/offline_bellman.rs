//! Offline meta-RL: the double-sampling Bellman loss, the offline gap bound
//! and the suboptimality chain through concentrability.

use metagen::offline::{
    loss_monte_carlo, offline_check, optimal_q, true_bellman_error, OfflineConfig, OfflineEnvironment, QStack,
};
use metagen::rng::rng_from_seed;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/data");
    let train = OfflineEnvironment::from_json_str(&std::fs::read_to_string(format!("{dir}/offline_train.json"))?)?;
    let test = OfflineEnvironment::from_json_str(&std::fs::read_to_string(format!("{dir}/offline_test.json"))?)?;

    let task = &train.tasks[0];
    let mut rng = rng_from_seed(1);
    let q = QStack::random(&task.mdp, &mut rng);
    let exact = true_bellman_error(&q, &task.mdp, &task.behavior)?;
    let mc = loss_monte_carlo(&q, &task.mdp, &task.behavior, 100, 5000, 2)?;
    println!("random Q: Bellman error {exact:.5}, double-sampling loss {:.5} ± {:.5}", mc.mean, mc.se);
    let opt = optimal_q(&task.mdp);
    println!("optimal Q: Bellman error {:.2e}", true_bellman_error(&opt, &task.mdp, &task.behavior)?);

    println!("\n{:>3} {:>4} {:>16} {:>8} {:>8} {:>16} {:>8}", "n", "m", "gap", "MI", "bound", "V* - V", "chain");
    for (n, m) in [(4, 16), (4, 64), (8, 64)] {
        let cfg = OfflineConfig {
            n,
            m,
            temperature: 0.3,
            meta_temperature: 0.3,
            pull: 1.0,
            trials: 200,
            replicates: 4,
            resamples: 128,
        };
        let r = offline_check(&train, &test, &cfg, 3)?;
        println!(
            "{n:>3} {m:>4} {:>+8.4} ± {:.4} {:>8.3} {:>8.3} {:>8.4} ± {:.4} {:>8.3}",
            r.gap.mean, r.gap.se, r.mi_upper, r.bound, r.regret.left.mean, r.regret.left.se, r.regret.right
        );
    }
    Ok(())
}
