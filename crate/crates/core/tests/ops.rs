use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transferattn::gradcheck::{check_inputs, op_cases, random_tensor, run_scope, Scope};
use transferattn::nn::Ctx;
use transferattn::{Graph, Tensor, TensorError, Var};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Reduces `out` to a scalar with fixed random weights so every output element matters.
fn probe(ctx: &mut Ctx, out: Var, w: &Tensor) -> transferattn::tensor::Result<Var> {
    let w = ctx.g.constant(w.reshape(ctx.g.shape(out)).unwrap());
    let m = ctx.g.mul(out, w)?;
    Ok(ctx.g.sum(m))
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let i = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let b = g.constant(t(&[2, 2], &[2., 3., 4., 5.]));
    let y = g.matmul(i, b).unwrap();
    assert_eq!(g.value(y).data(), &[2., 3., 4., 5.]);

    let a = g.constant(t(&[1, 2], &[1., 2.]));
    let c = g.constant(t(&[2, 1], &[3., 4.]));
    let y = g.matmul(a, c).unwrap();
    assert_eq!(g.value(y).data(), &[11.]);

    match g.matmul(a, a) {
        Err(TensorError::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![1, 2]);
            assert_eq!(rhs, vec![1, 2]);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random_tensor(&mut rng, &[5, 4], 1.0);
    let b = random_tensor(&mut rng, &[4, 3], 1.0);
    let w = random_tensor(&mut rng, &[15], 1.0);
    let r = check_inputs(
        "matmul",
        &[a, b],
        |ctx, v| {
            let y = ctx.g.matmul(v[0], v[1])?;
            probe(ctx, y, &w)
        },
        &mut rng,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3, 2], &[0., 0., 1000., 1000., 0., 3f64.ln()]));
    let y = g.softmax_rows(x).unwrap();
    let v = g.value(y).data();
    assert_eq!(&v[0..2], &[0.5, 0.5]);
    assert_eq!(&v[2..4], &[0.5, 0.5]);
    assert!((v[4] - 0.25).abs() < 1e-15 && (v[5] - 0.75).abs() < 1e-15);

    let bad = g.constant(t(&[1, 2], &[f64::NAN, 0.]));
    assert!(matches!(g.softmax_rows(bad), Err(TensorError::Numeric { .. })));
}

#[test]
fn softmax_rows_sum_to_one_and_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let x = random_tensor(&mut rng, &[4, 7], 20.0);
        let c: f64 = rng.random_range(-100.0..100.0);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = g.softmax_rows(xv).unwrap();
        let shifted = g.add_scalar(xv, c);
        let y2 = g.softmax_rows(shifted).unwrap();
        for r in 0..4 {
            let s: f64 = g.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        assert!(g.value(y).max_abs_diff(g.value(y2)) < 1e-12);
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gain = g.constant(Tensor::full(&[3], 1.0));
    let bias = g.constant(Tensor::zeros(&[3]));
    let x = g.constant(t(&[3], &[1., 1., 1.]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0., 0., 0.]);

    let gain = g.constant(Tensor::full(&[2], 1.0));
    let bias = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(t(&[2], &[-1., 1.]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    let f = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((g.value(y).data()[0] + f).abs() < 1e-15);
    assert!((g.value(y).data()[1] - f).abs() < 1e-15);
}

#[test]
fn grl_examples() {
    for (lambda, expect) in [(0.5, -0.5), (0.0, 0.0), (1.0, -1.0)] {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1., 2.]), true);
        let y = g.grl(x, lambda).unwrap();
        assert_eq!(g.value(y).data(), &[1., 2.]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[expect, expect]);
    }
    let mut g = Graph::new();
    let x = g.leaf(t(&[1], &[1.]), true);
    assert!(matches!(g.grl(x, -0.1), Err(TensorError::Config(_))));
}

#[test]
fn double_grl_restores_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x0 = random_tensor(&mut rng, &[3, 3], 1.0);
    let w = random_tensor(&mut rng, &[3, 3], 1.0);
    let run = |twice: bool| {
        let mut g = Graph::new();
        let x = g.leaf(x0.clone(), true);
        let mut y = x;
        if twice {
            y = g.grl(y, 1.0).unwrap();
            y = g.grl(y, 1.0).unwrap();
        }
        let wv = g.constant(w.clone());
        let e = g.exp(y);
        let m = g.mul(e, wv).unwrap();
        let s = g.sum(m);
        g.backward(s).unwrap();
        g.grad(x).unwrap().clone()
    };
    let plain = run(false);
    let twice = run(true);
    for (a, b) in plain.data().iter().zip(twice.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn shared_input_accumulates() {
    let x0 = t(&[2], &[0.3, -0.7]);
    let grad_of = |uses: &[bool; 2]| {
        let mut g = Graph::new();
        let x = g.leaf(x0.clone(), true);
        let mut parts = Vec::new();
        if uses[0] {
            let e = g.exp(x);
            parts.push(g.sum(e));
        }
        if uses[1] {
            let s = g.sigmoid(x);
            parts.push(g.sum(s));
        }
        let mut total = parts[0];
        for &p in &parts[1..] {
            total = g.add(total, p).unwrap();
        }
        g.backward(total).unwrap();
        g.grad(x).unwrap().clone()
    };
    let both = grad_of(&[true, true]);
    let a = grad_of(&[true, false]);
    let b = grad_of(&[false, true]);
    for i in 0..2 {
        assert!((both.data()[i] - a.data()[i] - b.data()[i]).abs() < 1e-15);
    }
}

#[test]
fn sigmoid_and_heads_round_trip() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(&[1]));
    let s = g.sigmoid(z);
    assert_eq!(g.value(s).item(), 0.5);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_tensor(&mut rng, &[7, 512], 1.0);
    let xv = g.constant(x.clone());
    let split = g.split_heads(xv, 8).unwrap();
    assert_eq!(g.shape(split), &[8, 7, 64]);
    let merged = g.merge_heads(split, 8).unwrap();
    assert_eq!(g.value(merged).data(), x.data());

    assert!(matches!(g.split_heads(xv, 7), Err(TensorError::Config(_))));
}

#[test]
fn log_is_clamped() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[0.0, 1e-20]), true);
    let y = g.log(x);
    assert_eq!(g.value(y).data(), &[1e-12f64.ln(), 1e-12f64.ln()]);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn every_op_passes_finite_difference_check() {
    let results = run_scope(Scope::Ops, 25, 2024).unwrap();
    assert_eq!(results.len(), op_cases().len());
    for r in results {
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}
