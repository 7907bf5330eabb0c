//! Picking the initialization with the best empirical meta-objective from a
//! small grid, and the regret this costs on the test environment.

use metagen::meta_rl::{regret1_check, MDPEnvironment, NoiseSchedule, RegretConfig};
use metagen::rng::{rng_from_seed, standard_normal};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/data");
    let train = MDPEnvironment::from_json_str(&std::fs::read_to_string(format!("{dir}/mdps_train.json"))?)?;
    let test = MDPEnvironment::from_json_str(&std::fs::read_to_string(format!("{dir}/mdps_test.json"))?)?;

    let mut rng = rng_from_seed(5);
    let candidates: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..train.param_dim()).map(|_| 2.0 * standard_normal(&mut rng)).collect())
        .collect();

    for n in [1, 4, 16] {
        let cfg = RegretConfig {
            n,
            schedule: NoiseSchedule::constant(1, 2, 2, 0.5, 0.05, 0.5, 0.1)?,
            replicates: 4,
            population_replicates: 128,
            trials: 100,
        };
        let r = regret1_check(&candidates, &train, &test, &cfg, 6)?;
        let mut picks = [0usize; 4];
        r.chosen.iter().for_each(|&c| picks[c] += 1);
        println!(
            "n={n:>2}: regret {:.4} ± {:.4} <= {:.4} ± {:.4}  best={} picks={picks:?}",
            r.left.mean, r.left.se, r.right.mean, r.right.se, r.best_candidate
        );
    }
    Ok(())
}
