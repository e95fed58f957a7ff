use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use transferattn::encoder::{Encoder, EncoderConfig, Pass, PositionalEmbedding, StandardBlock};
use transferattn::gradcheck::random_tensor;
use transferattn::model::{Model, ModelConfig};
use transferattn::nn::{Ctx, ParamStore};
use transferattn::{Domain, Tensor, TensorError};

fn small(positional: PositionalEmbedding, dtab_positions: Vec<usize>) -> EncoderConfig {
    EncoderConfig {
        feat_dim: 10,
        d_model: 16,
        heads: 4,
        layers: 3,
        mlp_ratio: 2,
        k_tokens: 5,
        dtab_positions,
        positional_embedding: positional,
        ..EncoderConfig::default()
    }
}

fn build(cfg: &EncoderConfig, seed: u64) -> (ParamStore, Encoder) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &mut rng, cfg).unwrap();
    (store, enc)
}

fn encode_eval(store: &ParamStore, enc: &Encoder, x: &Tensor) -> Tensor {
    let mut ctx = Ctx::new(store);
    let xv = ctx.g.constant(x.clone());
    let (f, _) = enc.encode(&mut ctx, xv, None, Pass::Eval).unwrap();
    ctx.g.value(f).clone()
}

#[test]
fn embed_shape() {
    let cfg = EncoderConfig {
        feat_dim: 64,
        k_tokens: 8,
        ..EncoderConfig::default()
    };
    let (store, enc) = build(&cfg, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ctx = Ctx::new(&store);
    let x = ctx.g.constant(random_tensor(&mut rng, &[2, 8, 64], 1.0));
    let t = enc.embed(&mut ctx, x).unwrap();
    assert_eq!(ctx.g.shape(t), &[2, 8, 512]);

    let wrong = ctx.g.constant(random_tensor(&mut rng, &[2, 8, 63], 1.0));
    assert!(matches!(enc.embed(&mut ctx, wrong), Err(TensorError::Config(_))));
}

#[test]
fn zero_embedding_gives_zero_tokens() {
    let cfg = small(PositionalEmbedding::None, vec![]);
    let (mut store, enc) = build(&cfg, 2);
    for name in ["embed.fc1.weight", "embed.fc1.bias", "embed.fc2.weight", "embed.fc2.bias"] {
        let id = store.find(name).unwrap();
        let s = store.get(id).value.shape().to_vec();
        *store.value_mut(id) = Tensor::zeros(&s);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ctx = Ctx::new(&store);
    let x = ctx.g.constant(random_tensor(&mut rng, &[2, 5, 10], 1.0));
    let t = enc.embed(&mut ctx, x).unwrap();
    assert!(ctx.g.value(t).data().iter().all(|&v| v == 0.0));
}

#[test]
fn standard_block_single_and_identical_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let b = StandardBlock::new(&mut store, &mut rng, "b", 16, 4, 32);
    let mut ctx = Ctx::new(&store);
    let x = ctx.g.constant(random_tensor(&mut rng, &[1, 1, 16], 1.0));
    let (_, w) = b.forward(&mut ctx, x).unwrap();
    assert!(ctx.g.value(w).data().iter().all(|&v| v == 1.0));

    let row = random_tensor(&mut rng, &[16], 1.0);
    let x = Tensor::new(vec![1, 2, 16], [row.data(), row.data()].concat()).unwrap();
    let xv = ctx.g.constant(x);
    let (y, _) = b.forward(&mut ctx, xv).unwrap();
    let y = ctx.g.value(y);
    assert_eq!(&y.data()[..16], &y.data()[16..]);
}

#[test]
fn permutation_invariance_depends_on_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&mut rng, &[3, 5, 10], 1.0);
    let mut perm: Vec<usize> = (0..5).collect();
    perm.shuffle(&mut rng);
    let permuted = Tensor::new(
        vec![3, 5, 10],
        (0..3)
            .flat_map(|b| perm.iter().flat_map(move |&t| (0..10).map(move |c| (b, t, c))))
            .map(|(b, t, c)| x.data()[(b * 5 + t) * 10 + c])
            .collect(),
    )
    .unwrap();

    for dtab in [vec![], vec![2]] {
        let (store, enc) = build(&small(PositionalEmbedding::None, dtab.clone()), 6);
        let a = encode_eval(&store, &enc, &x);
        let b = encode_eval(&store, &enc, &permuted);
        assert!(a.max_abs_diff(&b) < 1e-9, "dtab {dtab:?}");

        let (store, enc) = build(&small(PositionalEmbedding::Learned, dtab), 6);
        let a = encode_eval(&store, &enc, &x);
        let b = encode_eval(&store, &enc, &permuted);
        assert!(a.max_abs_diff(&b) > 1e-9);
    }
}

#[test]
fn equal_frames_pool_to_any_token() {
    let (store, enc) = build(&small(PositionalEmbedding::None, vec![2]), 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let frame = random_tensor(&mut rng, &[10], 1.0);
    let x = Tensor::new(vec![1, 5, 10], frame.data().repeat(5)).unwrap();
    let mut ctx = Ctx::new(&store);
    let xv = ctx.g.constant(x);
    let tokens = enc.embed(&mut ctx, xv).unwrap();
    let (f, last, _) = enc.run_blocks(&mut ctx, tokens, None, Pass::Eval).unwrap();
    let f = ctx.g.value(f).clone();
    let last = ctx.g.value(last);
    for t in 0..5 {
        let row = &last.data()[t * 16..(t + 1) * 16];
        assert!(row.iter().zip(f.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn default_encode_shape_and_determinism() {
    let cfg = EncoderConfig {
        k_tokens: 4,
        ..EncoderConfig::default()
    };
    let (store, enc) = build(&cfg, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random_tensor(&mut rng, &[2, 4, 2048], 1.0);
    let a = encode_eval(&store, &enc, &x);
    assert_eq!(a.shape(), &[2, 512]);
    let b = encode_eval(&store, &enc, &x);
    assert_eq!(a.data(), b.data());
}

#[test]
fn training_pass_needs_domains() {
    let (store, enc) = build(&small(PositionalEmbedding::Learned, vec![2]), 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut queues = enc.new_queues();
    let mut ctx = Ctx::new(&store);
    let x = ctx.g.constant(random_tensor(&mut rng, &[2, 5, 10], 1.0));
    let r = enc.encode(&mut ctx, x, None, Pass::Train {
        queues: &mut queues,
        rng: &mut rng,
    });
    assert!(matches!(r, Err(TensorError::Usage(_))));

    let doms = [Domain::Source, Domain::Target];
    let (_, aux) = enc
        .encode(&mut ctx, x, Some(&doms), Pass::Train {
            queues: &mut queues,
            rng: &mut rng,
        })
        .unwrap();
    assert!(aux.patch_loss.is_some());
    assert_eq!(aux.per_dtab.len(), 1);
    assert_eq!(queues[0].len(), 1);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = small(PositionalEmbedding::None, vec![3]);
    assert!(cfg.validate().unwrap_err().contains("dtab_positions"));
    cfg.dtab_positions = vec![0];
    cfg.heads = 3;
    assert!(cfg.validate().unwrap_err().contains("divisible"));
}

#[test]
fn parameter_count_is_closed_form() {
    for (positional, dtab) in [
        (PositionalEmbedding::None, vec![]),
        (PositionalEmbedding::Learned, vec![2]),
        (PositionalEmbedding::Learned, vec![0, 1, 2]),
    ] {
        let cfg = small(positional, dtab);
        let (store, _) = build(&cfg, 13);
        assert_eq!(store.trainable_count(), cfg.param_count());
    }

    let cfg = ModelConfig::default();
    let model = Model::new(&cfg, 0).unwrap();
    let n = model.trainable_params();
    assert_eq!(n, cfg.trainable_params());
    assert!((12_000_000..=20_000_000).contains(&n), "{n}");
    assert!(model.store.total_count() > n);
}
