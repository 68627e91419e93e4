use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn sig(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

// ---- independent oracles ----

fn matmul_oracle(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for l in 0..k {
                out[i * n + j] += a.data()[i * k + l] * b.data()[l * n + j];
            }
        }
    }
    out
}

fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, width: usize) -> Vec<f64> {
    let (t, c) = (x.rows(), x.cols());
    let o = w.cols();
    let mut out = Vec::new();
    for s in 0..=t - width {
        for oc in 0..o {
            let mut acc = b.data()[oc];
            for j in 0..width {
                for ic in 0..c {
                    acc += x.data()[(s + j) * c + ic] * w.data()[(j * c + ic) * o + oc];
                }
            }
            out.push(acc);
        }
    }
    out
}

/// Scalar-loop GRU for a single example.
fn gru_oracle(h: &[f64], x: &[f64], w: &Tensor, u: &Tensor, b: &[f64]) -> Vec<f64> {
    let hid = h.len();
    let g3 = 3 * hid;
    let col = |m: &Tensor, row: usize, c: usize| m.data()[row * g3 + c];
    let mut out = vec![0.0; hid];
    let mut r = vec![0.0; hid];
    let mut z = vec![0.0; hid];
    for j in 0..hid {
        let mut az = b[j];
        let mut ar = b[hid + j];
        for (i, xi) in x.iter().enumerate() {
            az += xi * col(w, i, j);
            ar += xi * col(w, i, hid + j);
        }
        for (i, hi) in h.iter().enumerate() {
            az += hi * col(u, i, j);
            ar += hi * col(u, i, hid + j);
        }
        z[j] = sig(az);
        r[j] = sig(ar);
    }
    for j in 0..hid {
        let mut an = b[2 * hid + j];
        for (i, xi) in x.iter().enumerate() {
            an += xi * col(w, i, 2 * hid + j);
        }
        for i in 0..hid {
            an += r[i] * h[i] * col(u, i, 2 * hid + j);
        }
        let n = an.tanh();
        out[j] = (1.0 - z[j]) * h[j] + z[j] * n;
    }
    out
}

// ---- dense ----

#[test]
fn dense_identity_and_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&[2, 3], &mut rng);
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    let y = dense_forward(&x, &eye, &Tensor::zeros(&[3]), Activation::Identity).unwrap();
    assert_eq!(y, x);
    let b = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
    let y = dense_forward(&x, &Tensor::zeros(&[3, 3]), &b, Activation::Identity).unwrap();
    for r in 0..2 {
        assert_eq!(y.row(r), b.data());
    }
}

#[test]
fn dense_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&[5, 4], &mut rng);
    let w = rand_tensor(&[4, 3], &mut rng);
    let b = rand_tensor(&[3], &mut rng);
    for act in [
        Activation::Identity,
        Activation::Relu,
        Activation::Tanh,
        Activation::Sigmoid,
    ] {
        let y = dense_forward(&x, &w, &b, act).unwrap();
        let oracle = matmul_oracle(&x, &w);
        for (i, v) in y.data().iter().enumerate() {
            let want = act.apply(oracle[i] + b.data()[i % 3]);
            assert!((v - want).abs() < 1e-12);
        }
    }
}

#[test]
fn dense_shape_mismatch() {
    let x = Tensor::zeros(&[2, 4]);
    let w = Tensor::zeros(&[3, 3]);
    assert!(dense_forward(&x, &w, &Tensor::zeros(&[3]), Activation::Identity).is_err());
}

// ---- conv1d ----

#[test]
fn conv_width_one_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[6, 4], &mut rng);
    let mut eye = Tensor::zeros(&[4, 4]);
    for i in 0..4 {
        eye.data_mut()[i * 4 + i] = 1.0;
    }
    let y = conv1d_forward(&x, &eye, &Tensor::zeros(&[4]), 1).unwrap();
    assert_eq!(y, x);
}

#[test]
fn conv_average_of_constant() {
    let x = Tensor::filled(&[7, 2], 1.5);
    let width = 3;
    // each output channel averages the matching input channel over the window
    let mut w = Tensor::zeros(&[width * 2, 2]);
    for j in 0..width {
        for c in 0..2 {
            w.data_mut()[(j * 2 + c) * 2 + c] = 1.0 / width as f64;
        }
    }
    let y = conv1d_forward(&x, &w, &Tensor::zeros(&[2]), width).unwrap();
    assert_eq!(y.shape(), &[5, 2]);
    assert!(y.data().iter().all(|v| (v - 1.5).abs() < 1e-15));
}

#[test]
fn conv_matches_sliding_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&[9, 5], &mut rng);
    let w = rand_tensor(&[3 * 5, 4], &mut rng);
    let b = rand_tensor(&[4], &mut rng);
    let y = conv1d_forward(&x, &w, &b, 3).unwrap();
    for (a, o) in y.data().iter().zip(conv_oracle(&x, &w, &b, 3)) {
        assert!((a - o).abs() < 1e-12);
    }
}

#[test]
fn conv_width_too_large() {
    let x = Tensor::zeros(&[3, 2]);
    let err = conv1d_forward(&x, &Tensor::zeros(&[8, 1]), &Tensor::zeros(&[1]), 4).unwrap_err();
    assert!(matches!(err, NnError::ConvWidth { width: 4, len: 3 }));
}

// ---- gru ----

#[test]
fn gru_saturated_update_gate_keeps_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (inp, hid) = (3, 4);
    let h = rand_tensor(&[1, hid], &mut rng);
    let x = rand_tensor(&[1, inp], &mut rng);
    let w = rand_tensor(&[inp, 3 * hid], &mut rng);
    let u = rand_tensor(&[hid, 3 * hid], &mut rng);
    let mut b = Tensor::zeros(&[3 * hid]);
    b.data_mut()[..hid].iter_mut().for_each(|v| *v = -1e3);
    let y = gru_step(&h, &x, &w, &u, &b).unwrap();
    for (a, want) in y.data().iter().zip(h.data()) {
        assert!((a - want).abs() < 1e-12);
    }
}

#[test]
fn gru_zero_state_uses_candidate_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (inp, hid) = (3, 4);
    let h = Tensor::zeros(&[1, hid]);
    let x = rand_tensor(&[1, inp], &mut rng);
    let w = rand_tensor(&[inp, 3 * hid], &mut rng);
    let u = rand_tensor(&[hid, 3 * hid], &mut rng);
    let b = rand_tensor(&[3 * hid], &mut rng);
    let y = gru_step(&h, &x, &w, &u, &b).unwrap();
    for j in 0..hid {
        let mut az = b.data()[j];
        let mut an = b.data()[2 * hid + j];
        for i in 0..inp {
            az += x.data()[i] * w.data()[i * 3 * hid + j];
            an += x.data()[i] * w.data()[i * 3 * hid + 2 * hid + j];
        }
        assert!((y.data()[j] - sig(az) * an.tanh()).abs() < 1e-12);
    }
}

#[test]
fn gru_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (bsz, inp, hid) = (3, 5, 6);
    let h = rand_tensor(&[bsz, hid], &mut rng);
    let x = rand_tensor(&[bsz, inp], &mut rng);
    let w = rand_tensor(&[inp, 3 * hid], &mut rng);
    let u = rand_tensor(&[hid, 3 * hid], &mut rng);
    let b = rand_tensor(&[3 * hid], &mut rng);
    let y = gru_step(&h, &x, &w, &u, &b).unwrap();
    for i in 0..bsz {
        let want = gru_oracle(h.row(i), x.row(i), &w, &u, b.data());
        for (a, o) in y.row(i).iter().zip(want) {
            assert!((a - o).abs() < 1e-10);
        }
    }
}

// ---- backward ----

#[test]
fn sum_of_weights_has_unit_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut params = ParamSet::new();
    let w = params.add("w", rand_tensor(&[3, 2], &mut rng));
    let mut g = Graph::new();
    let n = g.param(&params, w);
    let s = g.sum(n);
    let grads = g.backward(s, &params).unwrap();
    assert!(grads.tensors[0].data().iter().all(|&v| v == 1.0));
}

#[test]
fn constant_loss_has_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut params = ParamSet::new();
    params.add("w", rand_tensor(&[3, 2], &mut rng));
    let mut g = Graph::new();
    let c = g.input(Tensor::scalar(4.0));
    let grads = g.backward(c, &params).unwrap();
    assert_eq!(grads.max_abs(), 0.0);
}

#[test]
fn backward_before_forward_is_an_error() {
    let mut other = Graph::new();
    let stray = other.input(Tensor::scalar(1.0));
    let empty = Graph::new();
    assert!(matches!(
        empty.backward(stray, &ParamSet::new()),
        Err(NnError::BackwardBeforeForward)
    ));
}

fn dense_loss(
    layer: Dense,
    x: &Tensor,
) -> impl Fn(&ParamSet) -> Result<(Graph, NodeId), NnError> + '_ {
    move |p: &ParamSet| {
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let y = layer.forward(&mut g, p, xi)?;
        let sq = g.mul(y, y)?;
        let l = g.sum(sq);
        Ok((g, l))
    }
}

#[test]
fn gradcheck_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for act in [
        Activation::Identity,
        Activation::Tanh,
        Activation::Sigmoid,
        Activation::Relu,
    ] {
        let mut params = ParamSet::new();
        let layer = Dense::init(&mut params, "d", 4, 3, act, &mut rng);
        params
            .tensor_mut(layer.bias)
            .data_mut()
            .copy_from_slice(&[0.1, -0.2, 0.3]);
        let x = rand_tensor(&[5, 4], &mut rng);
        let report = gradient_check(&params, 1e-5, dense_loss(layer, &x)).unwrap();
        assert!(report.max_rel_error < 1e-4, "{act:?}: {report:?}");
    }
}

#[test]
fn gradcheck_conv1d() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut params = ParamSet::new();
    let conv = Conv1d::init(&mut params, "c", 3, 4, 3, Activation::Tanh, &mut rng);
    let x = rand_tensor(&[2, 7, 3], &mut rng);
    let report = gradient_check(&params, 1e-5, |p| {
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let y = conv.forward(&mut g, p, xi)?;
        let sq = g.mul(y, y)?;
        let l = g.sum(sq);
        Ok((g, l))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn gradcheck_gru_unrolled() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut params = ParamSet::new();
    let gru = GruLayer::init(&mut params, "g", 3, 4, &mut rng);
    let rand_bias: Vec<f64> = (0..12).map(|_| rng.random_range(-0.5..0.5)).collect();
    params
        .tensor_mut(gru.bias)
        .data_mut()
        .copy_from_slice(&rand_bias);
    let xs: Vec<Tensor> = (0..3).map(|_| rand_tensor(&[2, 3], &mut rng)).collect();
    let h0 = rand_tensor(&[2, 4], &mut rng);
    let report = gradient_check(&params, 1e-5, |p| {
        let mut g = Graph::new();
        let cell = gru.bind(&mut g, p);
        let mut h = g.input(h0.clone());
        for x in &xs {
            let xi = g.input(x.clone());
            h = cell.step(&mut g, h, xi)?;
        }
        let sq = g.mul(h, h)?;
        let l = g.sum(sq);
        Ok((g, l))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn gradcheck_masked_loglik_and_kl() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut params = ParamSet::new();
    let logits = params.add("logits", rand_tensor(&[3, 5], &mut rng));
    let mu = params.add("mu", rand_tensor(&[2, 3], &mut rng));
    let lv = params.add("lv", rand_tensor(&[2, 3], &mut rng));
    let mask: Vec<bool> = (0..15).map(|i| i % 5 != 1).collect();
    let report = gradient_check(&params, 1e-5, |p| {
        let mut g = Graph::new();
        let l = g.param(p, logits);
        let ll = g.masked_loglik(l, mask.clone(), vec![Some(0), None, Some(4)])?;
        let m = g.param(p, mu);
        let v = g.param(p, lv);
        let kl = g.kl_standard_normal(m, v)?;
        let nkl = g.scale(kl, -0.7);
        let tot = g.add(ll, nkl)?;
        Ok((g, tot))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn masked_target_rejected() {
    let mut g = Graph::new();
    let l = g.input(Tensor::zeros(&[1, 3]));
    let err = g
        .masked_loglik(l, vec![true, false, true], vec![Some(1)])
        .unwrap_err();
    assert!(matches!(err, NnError::MaskedTarget { row: 0, target: 1 }));
}

#[test]
fn backward_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut params = ParamSet::new();
    let layer = Dense::init(&mut params, "d", 3, 3, Activation::Tanh, &mut rng);
    let x = rand_tensor(&[4, 3], &mut rng);
    let (a, b) = (0.7, -1.3);
    let build = |which: u8| {
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let y = layer.forward(&mut g, &params, xi).unwrap();
        let l1 = g.sum(y);
        let sq = g.mul(y, y).unwrap();
        let l2 = g.sum(sq);
        let out = match which {
            1 => l1,
            2 => l2,
            _ => {
                let s1 = g.scale(l1, a);
                let s2 = g.scale(l2, b);
                g.add(s1, s2).unwrap()
            }
        };
        g.backward(out, &params).unwrap()
    };
    let (g1, g2, g12) = (build(1), build(2), build(3));
    for i in 0..params.len() {
        for j in 0..params.tensor(i).len() {
            let want = a * g1.tensors[i].data()[j] + b * g2.tensors[i].data()[j];
            assert!((g12.tensors[i].data()[j] - want).abs() < 1e-12);
        }
    }
}

// ---- adam ----

#[test]
fn adam_zero_gradient_keeps_params() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut params = ParamSet::new();
    params.add("w", rand_tensor(&[4], &mut rng));
    let before = params.clone();
    let mut state = AdamState::new(&params);
    let zero = Gradients::zeros_like(&params);
    state
        .update(&mut params, &zero, &AdamConfig::default())
        .unwrap();
    assert_eq!(params, before);
}

#[test]
fn adam_descends_on_square() {
    let mut params = ParamSet::new();
    params.add("w", Tensor::new(vec![1], vec![1.0]).unwrap());
    let mut state = AdamState::new(&params);
    let grads = Gradients {
        tensors: vec![Tensor::new(vec![1], vec![2.0]).unwrap()],
    };
    let cfg = AdamConfig {
        lr: 0.1,
        ..Default::default()
    };
    state.update(&mut params, &grads, &cfg).unwrap();
    assert!(params.tensor(0).data()[0].abs() < 1.0);
}

#[test]
fn adam_converges_on_quadratic() {
    // f(w) = (w0 - 1)^2 + 3 (w1 + 2)^2, optimum (1, -2)
    let mut params = ParamSet::new();
    params.add("w", Tensor::zeros(&[2]));
    let mut state = AdamState::new(&params);
    let cfg = AdamConfig {
        lr: 0.05,
        ..Default::default()
    };
    for _ in 0..200 {
        let w = params.tensor(0).data().to_vec();
        let grads = Gradients {
            tensors: vec![
                Tensor::new(vec![2], vec![2.0 * (w[0] - 1.0), 6.0 * (w[1] + 2.0)]).unwrap(),
            ],
        };
        state.update(&mut params, &grads, &cfg).unwrap();
    }
    let w = params.tensor(0).data();
    let dist = ((w[0] - 1.0).powi(2) + (w[1] + 2.0).powi(2)).sqrt();
    assert!(dist < 1e-3, "distance {dist}");
}

#[test]
fn adam_rejects_non_finite() {
    let mut params = ParamSet::new();
    params.add("enc.w", Tensor::zeros(&[2]));
    let mut state = AdamState::new(&params);
    let grads = Gradients {
        tensors: vec![Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap()],
    };
    let err = state
        .update(&mut params, &grads, &AdamConfig::default())
        .unwrap_err();
    assert!(matches!(err, NnError::NonFiniteGradient(n) if n == "enc.w"));
}
