//! Parse an expression, print its rule sequence and one-hot encoding, and
//! rebuild the string from the rules.
//!
//!     cargo run --example parse_expression -- "sin(x)+2*x"

use gvae::grammar::{decode_onehot, encode_onehot, parse, rules_to_string, tree_to_rules};
use gvae::Grammar;

fn main() {
    let input = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "sin(x)+2*x".into());
    let g = Grammar::equations();
    let tree = match parse(&input, &g) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(1);
        }
    };
    let rules = tree_to_rules(&tree);
    for &r in rules.as_slice() {
        println!("{:>3}  {}", r, g.display_rule(r));
    }

    let x = encode_onehot(&rules, &g, 15).expect("at most 15 rules");
    println!(
        "\none-hot {}x{} (padding rows use rule {}):",
        x.rows(),
        x.cols(),
        g.padding_rule()
    );
    for t in 0..x.rows() {
        let row: String = x
            .row(t)
            .iter()
            .map(|&v| if v == 1 { '1' } else { '.' })
            .collect();
        println!("  {row}");
    }

    let back = decode_onehot(&x).unwrap();
    println!("\nround trip: {}", rules_to_string(&back, &g).unwrap());
}
