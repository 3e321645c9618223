//! Layer examples against hand-computed values, and analytic gradients
//! against central finite differences.

mod common;

use common::{bilstm_final, layer_gradient_suite, random};
use fpbilstm::nn::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}


#[test]
fn conv1d_examples() {
    // Delta kernel wiring each channel to itself.
    let (k, c) = (5, 2);
    let mut w = vec![0.0; k * c * c];
    for ch in 0..c {
        w[(k / 2) * c * c + ch * c + ch] = 1.0;
    }
    let x = t(&[1, 4, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.input(x.clone()), g.input(t(&[k, c, c], &w)), g.input(Tensor::zeros(&[c])));
    let y = g.conv1d(xv, wv, bv).unwrap();
    assert_eq!(g.value(y).data(), x.data());

    let mut g = Graph::new();
    let (xv, wv, bv) = (g.input(t(&[1, 3, 1], &[1., 2., 3.])), g.input(Tensor::full(&[3, 1, 1], 1.0)), g.input(Tensor::zeros(&[1])));
    let y = g.conv1d(xv, wv, bv).unwrap();
    assert_eq!(g.value(y).data(), &[3., 6., 5.]);

    let mut g = Graph::new();
    let (xv, wv, bv) = (g.input(t(&[1, 3, 1], &[1., 2., 3.])), g.input(Tensor::zeros(&[3, 1, 2])), g.input(t(&[2], &[2.5, 2.5])));
    let y = g.conv1d(xv, wv, bv).unwrap();
    assert_eq!(g.value(y).data(), &[2.5; 6]);

    let mut g = Graph::new();
    let (xv, wv, bv) = (g.input(Tensor::zeros(&[1, 3, 2])), g.input(Tensor::zeros(&[3, 1, 2])), g.input(Tensor::zeros(&[2])));
    assert!(g.conv1d(xv, wv, bv).is_err());
}

#[test]
fn conv1d_same_padding_keeps_length() {
    for kernel in [15, 10, 5, 1, 2] {
        for len in [1, 3, 16, 40] {
            let mut g = Graph::new();
            let x = g.input(Tensor::full(&[2, len, 3], 1.0));
            let w = g.input(Tensor::full(&[kernel, 3, 4], 1.0));
            let b = g.input(Tensor::zeros(&[4]));
            let y = g.conv1d(x, w, b).unwrap();
            assert_eq!(g.shape(y), &[2, len, 4]);
        }
    }
}

#[test]
fn maxpool_examples() {
    let mut g = Graph::new();
    let x = g.input(t(&[1, 6, 1], &[1., 3., 2., 5., 4., 6.]));
    let y = g.maxpool1d(x, 4, 2).unwrap();
    assert_eq!(g.value(y).data(), &[5., 6.]);

    let x = g.input(Tensor::full(&[1, 9, 2], 7.0));
    let y = g.maxpool1d(x, 4, 2).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 2]);
    assert!(g.value(y).data().iter().all(|&v| v == 7.0));

    let x = g.input(Tensor::zeros(&[1, 3, 1]));
    assert!(g.maxpool1d(x, 4, 2).is_err());

    let mut len = 1200;
    let mut seen = Vec::new();
    for _ in 0..5 {
        len = fpbilstm::nn::pooled_len(len, 4, 2).unwrap();
        seen.push(len);
    }
    assert_eq!(seen, [599, 298, 148, 73, 35]);
    for l in 4..300 {
        assert_eq!(fpbilstm::nn::pooled_len(l, 4, 2), Some((l - 4) / 2 + 1));
    }
}

#[test]
fn maxpool_ties_route_to_first() {
    let mut g = Graph::new();
    let x = g.input(t(&[1, 4, 1], &[2., 2., 1., 2.]).with_grad());
    let y = g.maxpool1d(x, 4, 2).unwrap();
    let l = g.weighted_sum(y, &[1.0]).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1., 0., 0., 0.]);
}

#[test]
fn batch_norm_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[3, 7, 2], 4.0);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let (gamma, beta) = (g.input(Tensor::full(&[2], 1.0)), g.input(Tensor::zeros(&[2])));
    let (y, _) = g.batch_norm_train(xv, gamma, beta, 1e-5).unwrap();
    for ch in 0..2 {
        let vals: Vec<f64> = g.value(y).data().iter().skip(ch).step_by(2).copied().collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-5);
    }

    let (gamma, beta) = (g.input(Tensor::full(&[2], 2.0)), g.input(Tensor::full(&[2], 3.0)));
    let (y, _) = g.batch_norm_train(xv, gamma, beta, 1e-5).unwrap();
    let vals: Vec<f64> = g.value(y).data().iter().step_by(2).copied().collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
    assert!((mean - 3.0).abs() < 1e-6);
    assert!((std - 2.0).abs() < 1e-4);

    let (m, v, eps) = ([0.5, -1.0], [4.0, 0.25], 1e-5);
    let (gamma, beta) = (g.input(Tensor::full(&[2], 1.0)), g.input(Tensor::zeros(&[2])));
    let y = g.batch_norm_infer(xv, gamma, beta, &m, &v, eps).unwrap();
    for (i, (&out, &inp)) in g.value(y).data().iter().zip(x.data()).enumerate() {
        let ch = i % 2;
        let want = (inp - m[ch]) / (v[ch] + eps).sqrt();
        assert!((out - want).abs() < 1e-12);
    }

    let single = g.input(Tensor::zeros(&[1, 1, 2]));
    assert!(g.batch_norm_train(single, gamma, beta, 1e-5).is_err());
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scalar LSTM, gate order i, f, g, o.
fn scalar_lstm(xs: &[f64], wx: [f64; 4], wh: [f64; 4], b: [f64; 4]) -> Vec<f64> {
    let (mut h, mut c) = (0.0, 0.0);
    let mut out = Vec::new();
    for &x in xs {
        let z: Vec<f64> = (0..4).map(|k| x * wx[k] + h * wh[k] + b[k]).collect();
        let (i, f, g, o) = (sigmoid(z[0]), sigmoid(z[1]), z[2].tanh(), sigmoid(z[3]));
        c = f * c + i * g;
        h = o * c.tanh();
        out.push(h);
    }
    out
}

#[test]
fn lstm_matches_scalar_oracle() {
    let (wx, wh, b) = ([0.5, -0.3, 0.8, 1.1], [0.2, 0.4, -0.6, 0.3], [0.1, 1.0, -0.2, 0.05]);
    let xs = [0.7, -1.2, 0.3, 2.0];
    let mut g = Graph::new();
    let x = g.input(t(&[1, 4, 1], &xs));
    let (wxv, whv, bv) = (g.input(t(&[1, 4], &wx)), g.input(t(&[1, 4], &wh)), g.input(t(&[4], &b)));
    let fw = g.lstm(x, wxv, whv, bv, false).unwrap();
    for (got, want) in g.value(fw).data().iter().zip(scalar_lstm(&xs, wx, wh, b)) {
        assert!((got - want).abs() < 1e-12);
    }
    let bw = g.lstm(x, wxv, whv, bv, true).unwrap();
    let mut rev = xs;
    rev.reverse();
    let mut want = scalar_lstm(&rev, wx, wh, b);
    want.reverse();
    for (got, want) in g.value(bw).data().iter().zip(want) {
        assert!((got - want).abs() < 1e-12);
    }
    // single step
    let x1 = g.input(t(&[1, 1, 1], &[0.9]));
    let one = g.lstm(x1, wxv, whv, bv, false).unwrap();
    assert!((g.value(one).item() - scalar_lstm(&[0.9], wx, wh, b)[0]).abs() < 1e-12);
}

#[test]
fn bilstm_zero_weights_and_direction_symmetry() {
    let mut g = Graph::new();
    let x = g.input(t(&[1, 3, 2], &[1., -2., 3., 0.5, 0.1, 4.]));
    let z: Vec<Var> = (0..2)
        .flat_map(|_| [Tensor::zeros(&[2, 12]), Tensor::zeros(&[3, 12]), Tensor::zeros(&[12])])
        .map(|w| g.input(w))
        .collect();
    let fin = bilstm_final(&mut g, x, &z);
    assert!(g.value(fin).data().iter().all(|&v| v == 0.0));

    // Same weights both directions: reversing time swaps the halves.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = [random(&mut rng, &[2, 12], 0.5), random(&mut rng, &[3, 12], 0.5), random(&mut rng, &[12], 0.5)];
    let ws: Vec<Var> = w.iter().chain(w.iter()).map(|w| g.input(w.clone())).collect();
    let seq = [1., -2., 3., 0.5, 0.1, 4.];
    let rev = [0.1, 4., 3., 0.5, 1., -2.];
    let xa = g.input(t(&[1, 3, 2], &seq));
    let xb = g.input(t(&[1, 3, 2], &rev));
    let fa = bilstm_final(&mut g, xa, &ws);
    let fb = bilstm_final(&mut g, xb, &ws);
    let (a, b) = (g.value(fa).data(), g.value(fb).data());
    for j in 0..3 {
        assert!((a[j] - b[3 + j]).abs() < 1e-14);
        assert!((a[3 + j] - b[j]).abs() < 1e-14);
    }
}

#[test]
fn dense_softmax_examples() {
    let mut g = Graph::new();
    let x = g.input(t(&[1, 3], &[1., -2., 5.]));
    let eye = g.input(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
    let zero = g.input(Tensor::zeros(&[3]));
    let y = g.linear(x, eye, zero).unwrap();
    assert_eq!(g.value(y).data(), &[1., -2., 5.]);

    let eq = g.input(Tensor::full(&[2, 8], 3.3));
    let p = g.softmax(eq);
    assert!(g.value(p).data().iter().all(|&v| (v - 0.125).abs() < 1e-15));

    let two = g.input(t(&[1, 2], &[0.0, 2f64.ln()]));
    let p = g.softmax(two);
    let d = g.value(p).data();
    assert!((d[0] - 1.0 / 3.0).abs() < 1e-15 && (d[1] - 2.0 / 3.0).abs() < 1e-15);

    let bad = g.input(Tensor::zeros(&[4, 2]));
    assert!(g.linear(x, bad, zero).is_err());
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = Graph::new();
    let x = g.input(random(&mut rng, &[50, 8], 30.0));
    let p = g.softmax(x);
    for row in g.value(p).data().chunks(8) {
        assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn mse_examples() {
    let mut g = Graph::new();
    let mut target = vec![0.0; 8];
    target[2] = 1.0;
    let tv = g.input(t(&[1, 8], &target));
    let same = g.mse(tv, tv).unwrap();
    assert_eq!(g.value(same).item(), 0.0);
    let uniform = g.input(Tensor::full(&[1, 8], 0.125));
    let l = g.mse(uniform, tv).unwrap();
    assert!((g.value(l).item() - 0.109375).abs() < 1e-15);
    assert!(fpbilstm::nn::check_one_hot(g.value(tv)).is_ok());
    assert!(fpbilstm::nn::check_one_hot(&Tensor::full(&[1, 8], 0.125)).is_err());
}

#[test]
fn layer_gradients_match_finite_differences() {
    for case in layer_gradient_suite() {
        eprintln!("{}: worst relative error {:.2e}", case.name, case.worst_rel);
        assert!(case.ratio <= 1.0, "{}: error {:.3} x tolerance", case.name, case.ratio);
    }
}
