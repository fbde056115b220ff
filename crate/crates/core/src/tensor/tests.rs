use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    Tensor::from_fn(shape, |_| StandardNormal.sample(&mut r))
}

/// Central finite-difference check of every input's gradient. The output is
/// reduced to a scalar with fixed random weights. Returns the worst relative
/// error.
fn grad_check<F>(inputs: &[Tensor], seed: u64, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let scalar = |g: &mut Graph, vars: &[Var], w: &Option<Vec<f64>>| -> Var {
        let out = f(g, vars).unwrap();
        match w {
            Some(w) => g.weighted_sum(out, w).unwrap(),
            None => out,
        }
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    let n = g.value(out).numel();
    let weights = (n > 1).then(|| {
        let mut r = rng::seeded(seed);
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect::<Vec<f64>>()
    });
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let root = scalar(&mut g, &vars, &weights);
    g.backward(root).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (which, input) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[which]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; input.numel()]);
        for i in 0..input.numel() {
            let eval = |delta: f64| {
                let mut gg = Graph::inference();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| {
                        let mut x = x.clone();
                        if j == which {
                            x.data_mut()[i] += delta;
                        }
                        gg.constant(x)
                    })
                    .collect();
                let r = scalar(&mut gg, &vs, &weights);
                gg.value(r).data()[0]
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((analytic[i] - numeric).abs() / denom);
        }
    }
    worst
}

#[test]
fn tensor_shape_invariant() {
    assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    let x = Tensor::zeros(&[2, 3]);
    assert_eq!(x.numel(), 6);
    assert!(x.reshape(&[3, 2]).is_ok());
    assert!(x.reshape(&[4, 2]).is_err());
}

#[test]
fn conv1d_identity_kernel() {
    let mut g = Graph::new();
    let input = randn(&[1, 1, 7], 1);
    let x = g.constant(input.clone());
    let w = g.param(t(&[1, 1, 3], &[0.0, 1.0, 0.0]));
    let b = g.param(t(&[1], &[0.0]));
    let y = g.conv1d(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), input.data());
}

#[test]
fn conv1d_all_ones() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 2, 5], 1.0));
    let w = g.param(Tensor::full(&[2, 2, 3], 1.0));
    let b = g.param(Tensor::zeros(&[2]));
    let y = g.conv1d(x, w, b).unwrap();
    // Two input channels each contribute [2,3,3,3,2].
    assert_eq!(g.value(y).data(), &[4.0, 6.0, 6.0, 6.0, 4.0, 4.0, 6.0, 6.0, 6.0, 4.0]);
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 1, 5], 1.0));
    let w = g.param(Tensor::full(&[1, 1, 3], 1.0));
    let b = g.param(Tensor::zeros(&[1]));
    let y = g.conv1d(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, 3.0, 3.0, 3.0, 2.0]);
}

#[test]
fn conv1d_shape_errors() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 5]));
    let w = g.param(Tensor::zeros(&[4, 3, 3]));
    let b = g.param(Tensor::zeros(&[4]));
    let err = g.conv1d(x, w, b).unwrap_err();
    assert!(matches!(err, Error::Shape(_)), "{err}");
    let w = g.param(Tensor::zeros(&[4, 2, 5]));
    assert!(g.conv1d(x, w, b).is_err());
}

#[test]
fn conv1d_gradients() {
    let shapes = [(2, 3, 11, 4), (1, 1, 5, 2), (3, 2, 7, 3), (2, 4, 9, 1), (1, 3, 4, 5)];
    for (i, &(b, cin, l, cout)) in shapes.iter().enumerate() {
        let inputs = [
            randn(&[b, cin, l], 10 + i as u64),
            randn(&[cout, cin, 3], 20 + i as u64),
            randn(&[cout], 30 + i as u64),
        ];
        let err = grad_check(&inputs, i as u64, |g, v| g.conv1d(v[0], v[1], v[2]));
        assert!(err < 1e-4, "shape {:?}: {err}", (b, cin, l, cout));
    }
}

#[test]
fn linear_hand_cases() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2], &[2.0, 3.0]));
    let w = g.param(t(&[1, 2], &[1.0, 1.0]));
    let b = g.param(t(&[1], &[0.5]));
    let y = g.linear(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[5.5]);

    let input = randn(&[2, 3, 4], 3);
    let x = g.constant(input.clone());
    let eye = g.param(Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 }));
    let zero = g.param(Tensor::zeros(&[4]));
    let y = g.linear(x, eye, zero).unwrap();
    assert_eq!(g.value(y), &input);
}

#[test]
fn linear_gradients() {
    let shapes: [&[usize]; 5] = [&[3, 4], &[2, 3, 5], &[1, 1], &[7, 2], &[2, 2, 2, 3]];
    for (i, xs) in shapes.iter().enumerate() {
        let din = *xs.last().unwrap();
        let dout = 1 + i % 3 * 2;
        let inputs = [randn(xs, i as u64), randn(&[dout, din], 50 + i as u64), randn(&[dout], 60 + i as u64)];
        let err = grad_check(&inputs, 7, |g, v| g.linear(v[0], v[1], v[2]));
        assert!(err < 1e-4, "{xs:?}: {err}");
    }
}

#[test]
fn dropout_semantics() {
    let mut g = Graph::new();
    let input = randn(&[4, 5], 9);
    let x = g.param(input.clone());
    assert_eq!(g.dropout(x, 0.0, true, 1).unwrap(), x);
    assert_eq!(g.dropout(x, 0.5, false, 1).unwrap(), x);
    assert!(g.dropout(x, 1.0, true, 1).is_err());
    let big = g.constant(Tensor::full(&[100_000], 1.0));
    let y = g.dropout(big, 0.05, true, 3).unwrap();
    let vals = g.value(y).data();
    let zeros = vals.iter().filter(|v| **v == 0.0).count() as f64 / vals.len() as f64;
    assert!((zeros - 0.05).abs() < 0.005);
    assert!(vals.iter().all(|v| *v == 0.0 || (*v - 1.0 / 0.95).abs() < 1e-15));
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    assert!((mean - 1.0).abs() < 0.01);
    // Same seed, same mask.
    let y2 = g.dropout(big, 0.05, true, 3).unwrap();
    assert_eq!(g.value(y).data(), g.value(y2).data());
}

#[test]
fn relu_and_dropout_gradients() {
    for i in 0..5 {
        let x = randn(&[2 + i, 3], 70 + i as u64);
        assert!(grad_check(&[x.clone()], 1, |g, v| g.relu(v[0])) < 1e-4);
        let err = grad_check(&[x], 2, |g, v| g.dropout(v[0], 0.3, true, 17));
        assert!(err < 1e-4);
    }
}

#[test]
fn maxpool_floor_semantics() {
    let mut g = Graph::new();
    let x = g.param(t(&[1, 1, 5], &[1.0, 3.0, 2.0, 5.0, 4.0]));
    let y = g.maxpool1d(x).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 2]);
    assert_eq!(g.value(y).data(), &[3.0, 5.0]);
    let s = g.weighted_sum(y, &[1.0, 1.0]).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0, 1.0, 0.0]);

    let mut g = Graph::new();
    let x = g.param(t(&[1, 1, 2], &[2.0, 2.0]));
    let y = g.maxpool1d(x).unwrap();
    let s = g.weighted_sum(y, &[1.0]).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0], "ties route to the first index");

    let short = g.constant(Tensor::zeros(&[1, 1, 1]));
    assert!(matches!(g.maxpool1d(short), Err(Error::Shape(_))));
}

#[test]
fn maxpool_gradients() {
    for i in 0..5 {
        let x = randn(&[1 + i % 2, 2, 4 + i], 80 + i as u64);
        assert!(grad_check(&[x], 3, |g, v| g.maxpool1d(v[0])) < 1e-4);
    }
}

#[test]
fn layer_norm_hand_cases() {
    let mut g = Graph::new();
    let gamma = g.param(Tensor::full(&[2], 1.0));
    let beta = g.param(Tensor::zeros(&[2]));
    let x = g.constant(t(&[1, 2], &[1.0, 3.0]));
    let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
    let v = g.value(y).data();
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((v[0] + expect).abs() < 1e-12 && (v[1] - expect).abs() < 1e-12);
    assert!((v[1] - 1.0).abs() < 1e-5);

    let gamma = g.param(t(&[3], &[2.0, -1.0, 0.5]));
    let beta = g.param(t(&[3], &[0.1, 0.2, 0.3]));
    let x = g.constant(Tensor::full(&[2, 3], 4.0));
    let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.1, 0.2, 0.3, 0.1, 0.2, 0.3]);
}

#[test]
fn layer_norm_gradients() {
    for i in 0..5 {
        let d = 2 + i;
        let inputs = [randn(&[3, d], 90 + i as u64), randn(&[d], 91 + i as u64), randn(&[d], 92 + i as u64)];
        let err = grad_check(&inputs, 4, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
        assert!(err < 1e-4, "d={d}: {err}");
    }
}

#[test]
fn softmax_hand_cases() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 4], 0.7));
    let y = g.softmax(x, 1).unwrap();
    assert!(g.value(y).data().iter().all(|v| (v - 0.25).abs() < 1e-15));
    let x = g.constant(t(&[2], &[0.0, 2f64.ln()]));
    let y = g.softmax(x, 0).unwrap();
    let v = g.value(y).data();
    assert!((v[0] - 1.0 / 3.0).abs() < 1e-15 && (v[1] - 2.0 / 3.0).abs() < 1e-15);
    let x = g.constant(randn(&[3, 5, 2], 4));
    for axis in 0..3 {
        let y = g.softmax(x, axis).unwrap();
        let (outer, n, inner) = ops_axis_split(&[3, 5, 2], axis);
        let yv = g.value(y).data();
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..n).map(|j| yv[(o * n + j) * inner + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
    assert!(g.softmax(x, 3).is_err());
}

fn ops_axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product())
}

#[test]
fn softmax_gradients() {
    for i in 0..5 {
        let x = randn(&[2, 3 + i, 2], 100 + i as u64);
        let err = grad_check(&[x], 5, |g, v| g.softmax(v[0], i % 3));
        assert!(err < 1e-4);
    }
}

fn attention_inputs(d: usize, seed: u64) -> Vec<Tensor> {
    let mut v = Vec::new();
    for k in 0..4 {
        v.push(randn(&[d, d], seed + 2 * k));
        v.push(randn(&[d], seed + 2 * k + 1));
    }
    v
}

fn mha(g: &mut Graph, x: Var, p: &[Var], heads: usize) -> Result<Var> {
    let vars = AttentionVars {
        wq: p[0],
        bq: p[1],
        wk: p[2],
        bk: p[3],
        wv: p[4],
        bv: p[5],
        wo: p[6],
        bo: p[7],
    };
    g.multi_head_attention(x, &vars, heads)
}

#[test]
fn single_token_attention_is_value_projection() {
    let d = 8;
    let params = attention_inputs(d, 200);
    let input = randn(&[2, 1, d], 201);
    let mut g = Graph::new();
    let x = g.constant(input);
    let p: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let y = mha(&mut g, x, &p, 2).unwrap();
    let v = g.linear(x, p[4], p[5]).unwrap();
    let direct = g.linear(v, p[6], p[7]).unwrap();
    let (a, b) = (g.value(y).data(), g.value(direct).data());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn attention_is_permutation_equivariant() {
    let d = 16;
    let params = attention_inputs(d, 300);
    let (b, s) = (2, 9);
    let input = randn(&[b, s, d], 301);
    let perm = [4, 0, 8, 2, 7, 1, 3, 6, 5];
    let permuted = Tensor::from_fn(&[b, s, d], |i| {
        let (bi, si, di) = (i / (s * d), i / d % s, i % d);
        input.data()[(bi * s + perm[si]) * d + di]
    });
    let run = |x: Tensor| {
        let mut g = Graph::inference();
        let x = g.constant(x);
        let p: Vec<Var> = params.iter().map(|t| g.constant(t.clone())).collect();
        let y = mha(&mut g, x, &p, 4).unwrap();
        g.value(y).clone()
    };
    let y = run(input.clone());
    let yp = run(permuted);
    for bi in 0..b {
        for si in 0..s {
            for di in 0..d {
                assert_eq!(
                    yp.data()[(bi * s + si) * d + di].to_bits(),
                    y.data()[(bi * s + perm[si]) * d + di].to_bits()
                );
            }
        }
    }
}

#[test]
fn attention_head_divisibility() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 6]));
    assert!(matches!(g.attention(x, x, x, 4), Err(Error::Config(_))));
}

#[test]
fn attention_gradients() {
    let shapes = [(2, 5, 8, 2), (1, 3, 4, 1), (2, 4, 6, 3), (1, 1, 4, 2), (3, 2, 8, 4)];
    for (i, &(b, s, d, heads)) in shapes.iter().enumerate() {
        let mut inputs = vec![randn(&[b, s, d], 400 + i as u64)];
        inputs.extend(attention_inputs(d, 410 + 10 * i as u64));
        let err = grad_check(&inputs, 6, |g, v| mha(g, v[0], &v[1..], heads));
        assert!(err < 1e-4, "{:?}: {err}", (b, s, d, heads));
    }
}

#[test]
fn max_over_seq_cases() {
    let mut g = Graph::new();
    let input = randn(&[2, 1, 3], 5);
    let x = g.constant(input.clone());
    let y = g.max_over_seq(x).unwrap();
    assert_eq!(g.value(y).data(), input.data());
    let x = g.param(t(&[1, 3, 2], &[1.0, 9.0, 4.0, 2.0, 4.0, 3.0]));
    let y = g.max_over_seq(x).unwrap();
    assert_eq!(g.value(y).data(), &[4.0, 9.0]);
    let s = g.weighted_sum(y, &[1.0, 1.0]).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    for i in 0..5 {
        let x = randn(&[1 + i % 3, 2 + i, 3], 500 + i as u64);
        assert!(grad_check(&[x], 8, |g, v| g.max_over_seq(v[0])) < 1e-4);
    }
}

#[test]
fn losses() {
    let mut g = Graph::new();
    let p = g.param(t(&[3, 1], &[0.2, 0.4, 1.9]));
    let l = g.l1_loss(p, &[0.2, 0.4, 1.9]).unwrap();
    assert_eq!(g.value(l).data(), &[0.0]);
    let logits = g.param(Tensor::zeros(&[4, 5]));
    let ce = g.cross_entropy(logits, &[0, 1, 2, 4]).unwrap();
    assert!((g.value(ce).data()[0] - 5f64.ln()).abs() < 1e-15);
    assert!(g.cross_entropy(logits, &[0, 1, 2, 5]).is_err());
    assert!(g.l1_loss(p, &[1.0]).is_err());
    for i in 0..5 {
        let pred = randn(&[3 + i, 1], 600 + i as u64);
        let target: Vec<f64> = randn(&[3 + i], 610 + i as u64).into_data();
        assert!(grad_check(&[pred], 9, |g, v| g.l1_loss(v[0], &target)) < 1e-4);
        let logits = randn(&[2 + i, 5], 620 + i as u64);
        let labels: Vec<usize> = (0..2 + i).map(|k| (k * 3 + i) % 5).collect();
        assert!(grad_check(&[logits], 9, |g, v| g.cross_entropy(v[0], &labels)) < 1e-4);
    }
}

#[test]
fn composed_chain_matches_finite_differences() {
    let inputs = [randn(&[2, 3, 6], 700), randn(&[4, 3, 3], 701), randn(&[4], 702)];
    let err = grad_check(&inputs, 10, |g, v| {
        let c = g.conv1d(v[0], v[1], v[2])?;
        let r = g.relu(c)?;
        g.maxpool1d(r)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gradients_accumulate_across_uses() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.5, -2.0]));
    let y = g.add(x, x).unwrap();
    let s = g.weighted_sum(y, &[1.0, 3.0]).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 6.0]);
}

#[test]
fn ops_do_not_mutate_inputs_and_repeat_exactly() {
    let input = randn(&[2, 3, 8], 800);
    let w = randn(&[5, 3, 3], 801);
    let run = || {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let wv = g.param(w.clone());
        let b = g.param(Tensor::zeros(&[5]));
        let y = g.conv1d(x, wv, b).unwrap();
        let y = g.dropout(y, 0.1, true, 5).unwrap();
        assert_eq!(g.value(x), &input);
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_values_are_errors() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2], &[1e300, 1e300]));
    let w = g.param(t(&[1, 2], &[1e10, 1e10]));
    let b = g.param(t(&[1], &[0.0]));
    let err = g.linear(x, w, b).unwrap_err();
    assert!(matches!(err, Error::Numeric { .. }), "{err}");
}

#[test]
fn backward_requires_scalar_and_grad_graph() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[3]));
    assert!(g.backward(x).is_err());
    let mut g = Graph::inference();
    let x = g.param(Tensor::zeros(&[1]));
    assert!(g.backward(x).is_err());
}

#[test]
fn sinusoidal_first_row() {
    let pe = sinusoidal_encoding(5, 64);
    let row0 = &pe.data()[..64];
    for (j, v) in row0.iter().enumerate() {
        assert_eq!(*v, if j % 2 == 0 { 0.0 } else { 1.0 });
    }
    assert!((pe.data()[64] - 1f64.sin()).abs() < 1e-15);
}
