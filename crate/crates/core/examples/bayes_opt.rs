//! Batch Bayesian optimization of a 2-D function through an arbitrary
//! objective closure.

use gvae::bo::{bo_loop, BoConfig, BoState, FnObjective};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn branin_like(z: &[f64]) -> f64 {
    (z[0] - 0.4).powi(2) + 2.0 * (z[1] + 0.2).powi(2) + 0.3 * (4.0 * z[0]).sin()
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let init = (0..10)
        .map(|_| {
            let z = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let y = branin_like(&z);
            (z, None, y)
        })
        .collect();
    let state = BoState::new(false, init);
    let cfg = BoConfig {
        iterations: 6,
        batch_size: 4,
        seed: 2,
        ..BoConfig::default()
    };
    let out = bo_loop(state, &FnObjective(|z: &[f64]| Some(branin_like(z))), &cfg).unwrap();
    println!("initial best {:.4}", out.initial_best().unwrap());
    for s in &out.summaries {
        println!(
            "iteration {}  mean {:.4}  best {:.4}",
            s.iteration,
            s.mean_score.unwrap(),
            s.best
        );
    }
    let top = out.top(1)[0];
    println!("best point {:?}", top.z);
}
