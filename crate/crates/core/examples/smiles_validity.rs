//! Check SMILES strings against the bundled molecule grammar.
//!
//!     cargo run --example smiles_validity -- "c1ccccc1O" "C(=O"

use gvae::grammar::{parse, tree_to_rules};
use gvae::tasks::smiles_valid;
use gvae::Grammar;

fn main() {
    let mut inputs: Vec<String> = std::env::args().skip(1).collect();
    if inputs.is_empty() {
        inputs = [
            "CC(=O)Oc1ccccc1C(=O)O",
            "c1ccccc1",
            "C[C@@H](N)C(=O)O",
            "C(=O",
            "CC)O",
        ]
        .map(String::from)
        .to_vec();
    }
    let g = Grammar::smiles();
    println!("{} rules", g.num_rules());
    for s in &inputs {
        if smiles_valid(s) {
            let n = tree_to_rules(&parse(s, &g).unwrap()).len();
            println!("{s:<28} valid, {n} rules");
        } else {
            println!("{s:<28} invalid");
        }
    }
}
