//! Score expressions against the target function on the standard grid.
//!
//!     cargo run --example score_expressions -- "x+sin(x*x)" "x/3"

use gvae::tasks::{expression_score, ScoreDataset, TRUE_FUNCTION};
use gvae::Grammar;

fn main() {
    let mut inputs: Vec<String> = std::env::args().skip(1).collect();
    if inputs.is_empty() {
        inputs = [
            TRUE_FUNCTION,
            "x+sin(x*x)",
            "x/x+(x)+sin(x*x)",
            "x",
            "exp(x)",
            "x+(",
        ]
        .map(String::from)
        .to_vec();
    }
    let g = Grammar::equations();
    let d = ScoreDataset::standard();
    println!("target {TRUE_FUNCTION}, {} points", d.xs.len());
    for s in &inputs {
        match expression_score(s, &d, &g) {
            Some(v) => println!("{s:<24} {v:.4}"),
            None => println!("{s:<24} not scorable"),
        }
    }
}
