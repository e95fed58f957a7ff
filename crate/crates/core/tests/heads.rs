use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transferattn::gradcheck::random_tensor;
use transferattn::heads::{
    loss_adv, loss_cls, loss_soft_entropy, total_loss, AdversarialHead, ClassifierConfig, ClassifierHead, LossParts,
    LossWeights,
};
use transferattn::nn::{Ctx, ParamStore};
use transferattn::{Domain, Tensor, TensorError};

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn value_of(store: &ParamStore, logits: &Tensor, f: impl Fn(&mut Ctx, transferattn::Var) -> transferattn::tensor::Result<transferattn::Var>) -> f64 {
    let mut ctx = Ctx::new(store);
    let l = ctx.g.constant(logits.clone());
    let v = f(&mut ctx, l).unwrap();
    ctx.g.value(v).item()
}

#[test]
fn cross_entropy_examples_and_oracle() {
    let store = ParamStore::new();
    let c = 5;
    let uniform = Tensor::zeros(&[3, c]);
    let v = value_of(&store, &uniform, |ctx, l| loss_cls(ctx, l, &[0, 2, 4]));
    assert!((v - (c as f64).ln()).abs() < 1e-12);

    let mut confident = Tensor::zeros(&[2, c]);
    confident.data_mut()[1] = 60.0;
    confident.data_mut()[c + 3] = 60.0;
    assert!(value_of(&store, &confident, |ctx, l| loss_cls(ctx, l, &[1, 3])) < 1e-20);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let logits = random_tensor(&mut rng, &[4, 3], 3.0);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        let expect = -(0..4).map(|i| log_softmax(logits.row(i))[labels[i]]).sum::<f64>() / 4.0;
        let got = value_of(&store, &logits, |ctx, l| loss_cls(ctx, l, &labels));
        assert!((got - expect).abs() < 1e-12);
    }

    let mut ctx = Ctx::new(&store);
    let l = ctx.g.constant(Tensor::zeros(&[1, 3]));
    assert!(matches!(loss_cls(&mut ctx, l, &[3]), Err(TensorError::Config(_))));
}

#[test]
fn entropy_examples_and_oracle() {
    let store = ParamStore::new();
    let v = value_of(&store, &Tensor::zeros(&[2, 4]), |ctx, l| loss_soft_entropy(ctx, l));
    assert!((v - 4f64.ln()).abs() < 1e-12);

    let mut peaked = Tensor::zeros(&[1, 4]);
    peaked.data_mut()[2] = 40.0;
    assert!(value_of(&store, &peaked, |ctx, l| loss_soft_entropy(ctx, l)) < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let logits = random_tensor(&mut rng, &[3, 4], 3.0);
        let expect = (0..3)
            .map(|i| {
                let lp = log_softmax(logits.row(i));
                -lp.iter().map(|l| l.exp() * l).sum::<f64>()
            })
            .sum::<f64>()
            / 3.0;
        let got = value_of(&store, &logits, |ctx, l| loss_soft_entropy(ctx, l));
        assert!((got - expect).abs() < 1e-12);
    }
}

#[test]
fn argmax_ignores_constant_logit_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let head = ClassifierHead::new(&mut store, &mut rng, 8, 5, &ClassifierConfig::default()).unwrap();
    let argmax = |t: &Tensor, i: usize| {
        t.row(i)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0
    };
    for _ in 0..20 {
        let mut ctx = Ctx::new(&store);
        let f = ctx.g.constant(random_tensor(&mut rng, &[4, 8], 5.0));
        let logits = head.logits(&mut ctx, f).unwrap();
        let shift_all = ctx.g.constant(Tensor::full(&[5], rng.random_range(-50.0..50.0)));
        let shifted = ctx.g.add(logits, shift_all).unwrap();
        let a = ctx.g.value(logits).clone();
        let b = ctx.g.value(shifted).clone();
        let pa = ctx.g.softmax_rows(logits).unwrap();
        let pb = ctx.g.softmax_rows(shifted).unwrap();
        assert!(ctx.g.value(pa).max_abs_diff(ctx.g.value(pb)) < 1e-12);
        for i in 0..4 {
            assert_eq!(argmax(&a, i), argmax(&b, i));
        }
    }
}

fn adv_setup(seed: u64) -> (ParamStore, AdversarialHead, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let head = AdversarialHead::new(&mut store, &mut rng, 6);
    let f = random_tensor(&mut rng, &[2, 6], 1.0);
    (store, head, f)
}

/// Gradient of the adversarial loss with respect to the pooled features and the head's first weight.
fn adv_grads(store: &ParamStore, head: &AdversarialHead, f: &Tensor, lambda: f64, bypass: bool) -> (f64, Tensor, Tensor) {
    let mut ctx = Ctx::new(store);
    ctx.g.set_grl_bypass(bypass);
    let fv = ctx.g.leaf(f.clone(), true);
    let l = loss_adv(&mut ctx, head, fv, &[Domain::Source, Domain::Target], lambda).unwrap();
    ctx.g.backward(l).unwrap();
    let w = ctx.p(head.fc1.weight);
    (
        ctx.g.value(l).item(),
        ctx.g.grad(fv).unwrap().clone(),
        ctx.g.grad(w).unwrap().clone(),
    )
}

#[test]
fn adversarial_loss_reverses_encoder_gradient() {
    let (store, head, f) = adv_setup(4);
    let (loss, _, _) = adv_grads(&store, &head, &f, 1.0, false);
    assert!((loss - std::f64::consts::LN_2).abs() < 0.01);

    let (_, g0, _) = adv_grads(&store, &head, &f, 0.0, false);
    assert!(g0.data().iter().all(|&v| v == 0.0));

    for lambda in [0.05, 0.5, 1.0] {
        let (_, reversed, w_a) = adv_grads(&store, &head, &f, lambda, false);
        let (_, plain, w_b) = adv_grads(&store, &head, &f, lambda, true);
        assert!(plain.data().iter().any(|v| v.abs() > 1e-10));
        for (a, b) in reversed.data().iter().zip(plain.data()) {
            assert_eq!(*a, -lambda * b);
        }
        assert_eq!(w_a.data(), w_b.data());
    }
}

#[test]
fn total_loss_accounting() {
    let store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let vals: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..3.0)).collect();
        let w = LossWeights {
            entropy: rng.random_range(0.0..2.0),
            ib: rng.random_range(0.0..0.1),
            patch: rng.random_range(0.0..2.0),
        };
        let mut ctx = Ctx::new(&store);
        let v: Vec<_> = vals.iter().map(|&x| ctx.g.constant(Tensor::scalar(x))).collect();
        let parts = LossParts {
            cls: Some(v[0]),
            entropy: Some(v[1]),
            adv: Some(v[2]),
            ib: Some(v[3]),
            patch: Some(v[4]),
        };
        let (total, report) = total_loss(&mut ctx, &parts, &w).unwrap();
        let expect = vals[0] + w.entropy * vals[1] + vals[2] + w.ib * vals[3] + w.patch * vals[4];
        assert!((ctx.g.value(total).item() - expect).abs() < 1e-12);
        assert!((report.weighted_sum() - report.total).abs() < 1e-12);

        let zero = LossWeights {
            entropy: 0.0,
            ib: 0.0,
            patch: 0.0,
        };
        let cls_only = LossParts {
            cls: Some(v[0]),
            ..LossParts::default()
        };
        let (t, _) = total_loss(&mut ctx, &cls_only, &zero).unwrap();
        assert_eq!(ctx.g.value(t).item(), vals[0]);
        let (t, _) = total_loss(&mut ctx, &parts, &zero).unwrap();
        assert!((ctx.g.value(t).item() - vals[0] - vals[2]).abs() < 1e-12);
    }

    let mut ctx = Ctx::new(&store);
    let bad = LossWeights {
        entropy: -1.0,
        ..LossWeights::default()
    };
    assert!(matches!(
        total_loss(&mut ctx, &LossParts::default(), &bad),
        Err(TensorError::Config(_))
    ));
}

#[test]
fn classifier_variants() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let linear = ClassifierHead::new(&mut store, &mut rng, 8, 3, &ClassifierConfig::default()).unwrap();
    assert_eq!(linear.layers.len(), 1);
    assert_eq!(store.trainable_count(), 0);
    assert_eq!(store.total_count(), 24);
    let deep = ClassifierConfig {
        depth: 2,
        trainable: false,
    };
    let mut store = ParamStore::new();
    ClassifierHead::new(&mut store, &mut rng, 8, 3, &deep).unwrap();
    assert_eq!(store.total_count(), ClassifierHead::param_count(8, 3, &deep));
    let bad = ClassifierConfig {
        depth: 3,
        trainable: false,
    };
    assert!(ClassifierHead::new(&mut store, &mut rng, 8, 3, &bad).is_err());
}
