//! Search the latent space of a trained model for expressions close to the
//! target function.
//!
//!     cargo run --release --example train_vae -- model.bin
//!     cargo run --release --example expression_bo -- model.bin

use std::path::PathBuf;

use gvae::bo::{bo_loop, BoConfig, BoState, DecoderObjective};
use gvae::latent::{mean_encoding, DecodeMode};
use gvae::tasks::{expression_score, gen_expressions, ScoreDataset};
use gvae::vae::VaeModel;
use gvae::Grammar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let path = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "example_model.bin".into()),
    );
    let model = VaeModel::load(&path).unwrap_or_else(|e| {
        eprintln!("{}: {e}; run the train_vae example first", path.display());
        std::process::exit(1);
    });
    let g = Grammar::equations();
    let d = ScoreDataset::standard();

    let init = gen_expressions(200, 15, &g, &mut ChaCha8Rng::seed_from_u64(9))
        .into_iter()
        .filter_map(|s| {
            let y = expression_score(&s, &d, &g)?;
            Some((mean_encoding(&s, &model, &g).ok()?, Some(s), y))
        })
        .collect();
    let objective = DecoderObjective {
        model: &model,
        grammar: &g,
        mode: DecodeMode::Argmax,
        scorer: |s: &str| expression_score(s, &d, &g),
    };
    let cfg = BoConfig {
        iterations: 3,
        batch_size: 10,
        seed: 1,
        ..BoConfig::default()
    };
    let out = bo_loop(BoState::new(false, init), &objective, &cfg).unwrap();
    for s in &out.summaries {
        println!(
            "iteration {}  valid {:.2}  best {:.4}",
            s.iteration, s.fraction_valid, s.best
        );
    }
    for r in out.top(5) {
        println!("{:.4}  {}", r.score, r.text.as_deref().unwrap_or("?"));
    }
}
