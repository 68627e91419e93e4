//! Interpolate between two expressions and decode a small grid around one,
//! using a model saved by the `train_vae` example.
//!
//!     cargo run --release --example train_vae -- model.bin
//!     cargo run --release --example latent_exploration -- model.bin

use std::path::PathBuf;

use gvae::latent::{format_interpolation, interpolate, neighborhood_grid, DecodeMode};
use gvae::vae::VaeModel;
use gvae::Grammar;

fn main() {
    let path = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "example_model.bin".into()),
    );
    let model = match VaeModel::load(&path) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("{}: {e}; run the train_vae example first", path.display());
            std::process::exit(1);
        }
    };
    let g = Grammar::equations();

    let r = interpolate("x*x", "sin(x)+3", 6, &model, &g, DecodeMode::Argmax, 0).unwrap();
    print!("{}", format_interpolation(&r));

    let grid = neighborhood_grid("x+1", 1.0, 5, 20, &model, &g, 7).unwrap();
    println!();
    for row in 0..5 {
        let line: Vec<String> = grid
            .cells
            .iter()
            .filter(|c| c.row == row)
            .map(|c| format!("{:<12}", c.modal.as_deref().unwrap_or("-")))
            .collect();
        println!("{}", line.join(""));
    }
}
