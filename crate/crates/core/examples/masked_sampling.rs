//! Decode random logits with the grammar stack machine: sampled and argmax
//! decodes are always derivable, or flagged as exhausted.

use gvae::sampler::{argmax_sequence, sample_sequence, DecodeStatus};
use gvae::vae::LogitMatrix;
use gvae::Grammar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let g = Grammar::equations();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows = 15;
    // Random logits, nudged toward rules that close the derivation.
    let closing = [
        g.find_rule("S", &["T"]).unwrap(),
        g.find_rule("T", &["'x'"]).unwrap(),
        g.find_rule("T", &["'1'"]).unwrap(),
    ];
    let data = (0..rows * g.num_rules())
        .map(|i| {
            rng.random_range(-2.0..2.0)
                + if closing.contains(&(i % g.num_rules())) {
                    1.5
                } else {
                    0.0
                }
        })
        .collect();
    let f = LogitMatrix::new(rows, g.num_rules(), data).unwrap();

    let top = argmax_sequence(&f, &g).unwrap();
    println!("argmax: {:?} {:?}", top.text(&g), top.rules.as_slice());

    let mut exhausted = 0;
    for i in 0..10 {
        let d = sample_sequence(&f, &g, &mut rng).unwrap();
        match d.status {
            DecodeStatus::Complete => println!("sample {i}: {}", d.text(&g).unwrap()),
            _ => {
                exhausted += 1;
                println!("sample {i}: ran out of steps after {} rules", d.rules.len());
            }
        }
    }
    println!("{exhausted} of 10 exhausted");
}
