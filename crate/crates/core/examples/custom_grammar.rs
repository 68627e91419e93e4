//! Load a grammar from text, inspect its masks and enumerate every
//! derivation of a short decode.

use gvae::grammar::rules_to_string;
use gvae::sampler::enumerate_support;
use gvae::vae::LogitMatrix;
use gvae::Grammar;

const BRACKETS: &str = "
# non-empty balanced parentheses
S -> T | T S
T -> '(' ')' | '(' S ')'
";

fn main() {
    let g = Grammar::load(BRACKETS).expect("grammar parses");
    for i in 0..g.num_rules() {
        println!("{i}: {}", g.display_rule(i));
    }
    for (nt, name) in g.nonterminals().iter().enumerate() {
        println!("mask[{name}] = {:?}", g.masks().mask(nt));
    }

    // Flat logits except a preference for the shortest alternatives.
    let mut data = vec![0.0; 7 * g.num_rules()];
    for t in 0..7 {
        data[t * g.num_rules()] = 1.0;
        data[t * g.num_rules() + 2] = 1.0;
    }
    let f = LogitMatrix::new(7, g.num_rules(), data).unwrap();
    let support = enumerate_support(&f, &g, 7).unwrap();
    let mut outcomes: Vec<_> = support
        .completed
        .iter()
        .map(|(r, p)| (rules_to_string(r, &g).unwrap(), *p))
        .collect();
    outcomes.sort_by(|a, b| b.1.total_cmp(&a.1));
    for (s, p) in outcomes.iter().take(8) {
        println!("{p:.4}  {s:?}");
    }
    println!(
        "exhausted {:.4}, total {:.12}",
        support.exhausted_mass,
        support.total_mass()
    );
}
