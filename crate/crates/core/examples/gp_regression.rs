//! Fit a GP to noisy samples of a 1-D function, then print the predictive
//! band and expected improvement on a grid. A larger sparse fit follows.

use gvae::bo::{expected_improvement, fit_gp, GpConfig, MethodChoice};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn f(x: f64) -> f64 {
    (3.0 * x).sin() + 0.5 * x
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z: Vec<Vec<f64>> = (0..12).map(|_| vec![rng.random_range(-2.0..2.0)]).collect();
    let y: Vec<f64> = z
        .iter()
        .map(|p| f(p[0]) + 0.05 * rng.random_range(-1.0..1.0))
        .collect();

    let m = fit_gp(&z, &y, &GpConfig::default()).unwrap();
    println!("hyperparameters {:?}", m.hyper);
    println!("log marginal likelihood {:.3}", m.log_marginal_likelihood);

    let best = y.iter().copied().fold(f64::INFINITY, f64::min);
    println!("\n     x     mean     sd   truth      EI");
    for i in 0..=16 {
        let x = -2.0 + 0.25 * i as f64;
        let (mu, var) = m.predict_latent(&[x]);
        let ei = expected_improvement(mu, var, best);
        println!("{x:6.2} {mu:8.3} {:6.3} {:7.3} {ei:7.4}", var.sqrt(), f(x));
    }

    let z: Vec<Vec<f64>> = (0..1500)
        .map(|_| vec![rng.random_range(-2.0..2.0)])
        .collect();
    let y: Vec<f64> = z
        .iter()
        .map(|p| f(p[0]) + 0.1 * rng.random_range(-1.0..1.0))
        .collect();
    let cfg = GpConfig {
        method: MethodChoice::Fitc,
        inducing: 40,
        iterations: 50,
        ..GpConfig::default()
    };
    let sparse = fit_gp(&z, &y, &cfg).unwrap();
    let (mu, _) = sparse.predict(&[0.5]);
    println!(
        "\nsparse fit on {} points: mean at 0.5 = {mu:.3} (truth {:.3})",
        sparse.num_points(),
        f(0.5)
    );
}
