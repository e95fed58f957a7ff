use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use transferattn::manifest::Manifest;
use transferattn::synth::{generate, write_dataset, SynthSpec, SynthVideo, SOURCE_MANIFEST, TARGET_MANIFEST, TEST_MANIFEST};
use transferattn::heads::LossMask;
use transferattn::trainer::{desk_config, train, TrainData};
use transferattn::Domain;

fn small(seed: u64) -> SynthSpec {
    SynthSpec {
        videos_per_class: 6,
        test_videos_per_class: 3,
        frames_min: 20,
        frames_max: 30,
        seed,
        ..SynthSpec::default()
    }
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn same_seed_writes_identical_bytes() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(&small(3), a.path()).unwrap();
    write_dataset(&small(3), b.path()).unwrap();
    write_dataset(&small(4), c.path()).unwrap();
    let (ta, tb, tc) = (tree(a.path()), tree(b.path()), tree(c.path()));
    assert_eq!(ta.len(), 6 * (6 + 6 + 3) + 3);
    assert_eq!(ta, tb);
    assert_ne!(ta, tc);
}

#[test]
fn manifests_hide_target_training_labels() {
    let dir = tempfile::tempdir().unwrap();
    let paths = write_dataset(&small(0), dir.path()).unwrap();
    assert!(paths.source.ends_with(SOURCE_MANIFEST));
    let load = |name: &str| Manifest::load(&dir.path().join(name)).unwrap();
    let (src, tgt, test) = (load(SOURCE_MANIFEST), load(TARGET_MANIFEST), load(TEST_MANIFEST));
    assert!(src.records.iter().all(|r| r.label.is_some() && r.domain == Domain::Source));
    assert!(tgt.records.iter().all(|r| r.label.is_none() && r.domain == Domain::Target));
    assert!(test.records.iter().all(|r| r.label.is_some() && r.domain == Domain::Target));
    assert_eq!(src.n_classes(), 6);
    assert_eq!(src.feat_dim(), 64);
    let v = test.load_video(&test.records[0].id).unwrap();
    assert!((20..=30).contains(&v.n_frames()));
}

#[test]
fn classes_are_exactly_balanced() {
    let spec = SynthSpec {
        n_classes: 5,
        ..small(1)
    };
    let data = generate(&spec).unwrap();
    for (split, per) in [(&data.source, 6), (&data.target_train, 6), (&data.target_test, 3)] {
        let mut counts = vec![0; 5];
        split.iter().for_each(|v| counts[v.class] += 1);
        assert_eq!(counts, vec![per; 5]);
    }
}

fn moments(videos: &[SynthVideo]) -> (Vec<f64>, Vec<f64>) {
    let d = videos[0].features.feat_dim();
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    let mut n = 0.0;
    for v in videos {
        for t in 0..v.features.n_frames() {
            for (j, x) in v.features.frame(t).iter().enumerate() {
                sum[j] += x;
                sq[j] += x * x;
            }
            n += 1.0;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let var = sq.iter().zip(&mean).map(|(q, m)| q / n - m * m).collect();
    (mean, var)
}

#[test]
fn zero_shift_makes_domains_identically_distributed() {
    let spec = SynthSpec {
        theta_deg: 0.0,
        translation: 0.0,
        videos_per_class: 40,
        ..small(2)
    };
    let data = generate(&spec).unwrap();
    for v in data.target_train.iter().chain(&data.target_test) {
        for (a, b) in v.features.frames.data.iter().zip(&v.clean.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    for v in &data.source {
        assert_eq!(v.features.frames.data, v.clean.data);
    }
    let (ms, vs) = moments(&data.source);
    let (mt, vt) = moments(&data.target_train);
    for j in 0..ms.len() {
        assert!((ms[j] - mt[j]).abs() < 0.05, "mean of dim {j}: {} vs {}", ms[j], mt[j]);
        assert!((vs[j] - vt[j]).abs() < 0.1 * vs[j].max(0.1), "variance of dim {j}");
    }

    let shifted = generate(&SynthSpec { ..small(2) }).unwrap();
    let moved = shifted
        .target_train
        .iter()
        .any(|v| v.features.frames.data.iter().zip(&v.clean.data).any(|(a, b)| (a - b).abs() > 0.1));
    assert!(moved);
}

/// Clean frames resampled to `k` evenly spaced positions and flattened.
fn probe_features(v: &SynthVideo, k: usize) -> Vec<f64> {
    let n = v.clean.rows;
    (0..k)
        .flat_map(|i| {
            let t = (i * (n - 1)) / (k - 1);
            v.clean.data[t * v.clean.cols..(t + 1) * v.clean.cols].to_vec()
        })
        .collect()
}

#[test]
fn linear_probe_recovers_classes_from_clean_features() {
    let spec = SynthSpec {
        frames_min: 40,
        frames_max: 40,
        videos_per_class: 60,
        test_videos_per_class: 30,
        seed: 7,
        ..SynthSpec::default()
    };
    let data = generate(&spec).unwrap();
    let k = 8;
    let to_matrix = |vs: &[SynthVideo]| {
        let rows: Vec<Vec<f64>> = vs.iter().map(|v| probe_features(v, k)).collect();
        DMatrix::from_fn(rows.len(), rows[0].len() + 1, |i, j| if j < rows[0].len() { rows[i][j] } else { 1.0 })
    };
    let x = to_matrix(&data.source);
    let y = DMatrix::from_fn(data.source.len(), spec.n_classes, |i, c| f64::from(data.source[i].class == c));
    // Ridge regression in the dual: W = Xᵀ (X Xᵀ + λI)⁻¹ Y.
    let gram = &x * x.transpose() + DMatrix::identity(x.nrows(), x.nrows()) * 1.0;
    let alpha = gram.cholesky().unwrap().solve(&y);
    let w = x.transpose() * alpha;
    let xt = to_matrix(&data.target_test);
    let scores = xt * w;
    let correct = (0..scores.nrows())
        .filter(|&i| scores.row(i).transpose().argmax().0 == data.target_test[i].class)
        .count();
    let acc = correct as f64 / scores.nrows() as f64;
    assert!(acc >= 0.99, "probe accuracy {acc}");
}

#[test]
fn invalid_specs_are_rejected() {
    for spec in [
        SynthSpec {
            n_classes: 1,
            ..small(0)
        },
        SynthSpec {
            signal_dim: 65,
            ..small(0)
        },
        SynthSpec {
            frames_min: 10,
            frames_max: 5,
            ..small(0)
        },
        SynthSpec {
            shifted_fraction: 1.5,
            ..small(0)
        },
    ] {
        assert!(generate(&spec).is_err());
    }
}

fn source_only_accuracy(spec: &SynthSpec) -> f64 {
    let data = TrainData::from_synth(spec, &generate(spec).unwrap()).unwrap();
    let (mut model, mut train_cfg) = desk_config(spec);
    model.encoder.dtab_positions.clear();
    train_cfg.losses = LossMask::cls_only();
    train_cfg.seed = spec.seed;
    train_cfg.eval_every = 0;
    train(&model, &train_cfg, &data, None).unwrap().final_eval.unwrap().accuracy
}

#[test]
fn unshifted_noise_free_task_is_learned() {
    let spec = SynthSpec {
        theta_deg: 0.0,
        translation: 0.0,
        noise: 0.0,
        ..SynthSpec::default()
    };
    let acc = source_only_accuracy(&spec);
    assert!(acc >= 0.95, "target accuracy {acc}");
}

#[test]
fn larger_rotation_degrades_source_only_accuracy() {
    let mean = |theta: f64| {
        (0..3)
            .map(|seed| {
                source_only_accuracy(&SynthSpec {
                    theta_deg: theta,
                    seed,
                    test_videos_per_class: 200,
                    ..SynthSpec::default()
                })
            })
            .sum::<f64>()
            / 3.0
    };
    let accs = [mean(0.0), mean(30.0), mean(60.0)];
    println!("source-only target accuracy at 0/30/60 degrees: {accs:.3?}");
    assert!(accs[0] >= accs[1] && accs[1] >= accs[2], "{accs:?}");
}
