//! Train a small grammar VAE on generated expressions, save it, and report
//! reconstruction accuracy and prior validity.
//!
//!     cargo run --release --example train_vae -- model.bin

use std::path::PathBuf;

use gvae::latent::{prior_validity, reconstruction_accuracy, DecodeMode};
use gvae::tasks::gen_expressions;
use gvae::vae::{onehot_for, train, TrainConfig, TrainState, VaeConfig, VaeModel};
use gvae::Grammar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "example_model.bin".into()),
    );
    let g = Grammar::equations();
    let data = gen_expressions(1000, 15, &g, &mut ChaCha8Rng::seed_from_u64(1));

    let mut cfg = VaeConfig::equations(&g);
    cfg.z_dim = 10;
    cfg.kl_weight = 0.1;
    cfg.arch.gru_layers = 1;
    cfg.arch.gru_hidden = 48;
    let xs: Vec<_> = data
        .iter()
        .map(|s| onehot_for(s, &g, cfg.t_max).unwrap())
        .collect();
    let model = VaeModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();

    let tc = TrainConfig {
        seed: 3,
        lr: 2e-3,
        epochs: 10,
        batch: 32,
    };
    let state = train(TrainState::new(model), &xs, &tc, &g, |s| {
        let e = s.history.last().unwrap();
        println!(
            "epoch {:>2}  elbo {:.3}  recon {:.3}  kl {:.3}",
            e.epoch, e.mean_elbo, e.mean_recon, e.mean_kl
        );
    })
    .unwrap();
    state.model.save(&out).unwrap();
    println!("saved {}", out.display());

    let acc = reconstruction_accuracy(&data[..100], 1, 1, &state.model, &g, DecodeMode::Argmax, 0)
        .unwrap();
    println!(
        "argmax reconstruction on 100 training strings: {:.2}",
        acc.accuracy
    );
    let prior = prior_validity(200, 5, &state.model, &g, 0).unwrap();
    println!(
        "valid prior decodes: {:.3} ({} exhausted)",
        prior.fraction, prior.exhausted
    );
}
