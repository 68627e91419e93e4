//! Build a small recurrent graph on the tape, backpropagate, and compare
//! against finite differences.

use gvae::nn::{gradient_check, Activation, Dense, Graph, GruLayer, ParamSet, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = ParamSet::new();
    let gru = GruLayer::init(&mut params, "gru", 2, 3, &mut rng);
    let head = Dense::init(&mut params, "head", 3, 1, Activation::Identity, &mut rng);
    let xs: Vec<Tensor> = (0..4)
        .map(|t| Tensor::matrix(1, 2, vec![t as f64 * 0.3, 1.0 - t as f64 * 0.2]).unwrap())
        .collect();

    let loss = |p: &ParamSet| {
        let mut g = Graph::new();
        let cell = gru.bind(&mut g, p);
        let mut h = g.input(Tensor::zeros(&[1, 3]));
        for x in &xs {
            let xi = g.input(x.clone());
            h = cell.step(&mut g, h, xi)?;
        }
        let y = head.forward(&mut g, p, h)?;
        let sq = g.mul(y, y)?;
        let l = g.sum(sq);
        Ok((g, l))
    };

    let (g, l) = loss(&params).unwrap();
    println!("loss {:.6}, {} tape nodes", g.value(l).data()[0], g.len());
    let grads = g.backward(l, &params).unwrap();
    for (i, t) in grads.tensors.iter().enumerate() {
        println!(
            "{:<12} |grad|max {:.4}",
            params.name(i),
            t.data().iter().fold(0.0f64, |a, v| a.max(v.abs()))
        );
    }
    let report = gradient_check(&params, 1e-5, loss).unwrap();
    println!(
        "max relative error vs finite differences: {:.2e}",
        report.max_rel_error
    );
}
