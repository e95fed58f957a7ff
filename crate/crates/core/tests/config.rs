use std::fs;
use std::path::Path;

use transferattn::config::{echo_config, RunConfig};
use transferattn::synth::SynthSpec;
use transferattn::trainer::{desk_config, hyper_tuple, TrainConfig};

const MINIMAL: &str = r#"
[data]
source = "src.jsonl"
target = "tgt.jsonl"
"#;

#[test]
fn minimal_config_takes_defaults() {
    let cfg = RunConfig::parse(MINIMAL, "run.toml").unwrap();
    assert_eq!(cfg.train, TrainConfig::default());
    assert_eq!(cfg.model.encoder.d_model, 512);
    assert_eq!(cfg.ablation.seeds, vec![0, 1, 2]);
    assert!(cfg.data.test.is_none() && cfg.preset.is_none());
}

#[test]
fn unknown_keys_are_rejected_with_location() {
    let text = format!("{MINIMAL}\n[model.encoder]\nd_model = 64\ndmodel = 64\n");
    let err = RunConfig::parse(&text, "run.toml").unwrap_err();
    assert_eq!(err.field.as_deref(), Some("dmodel"));
    assert_eq!(err.line, Some(8));
    assert!(err.to_string().starts_with("run.toml:8"), "{err}");

    let err = RunConfig::parse(&format!("colour = 1\n{MINIMAL}"), "run.toml").unwrap_err();
    assert_eq!(err.field.as_deref(), Some("colour"));
    assert_eq!(err.line, Some(1));
}

#[test]
fn type_and_range_errors_point_at_the_field() {
    let err = RunConfig::parse(&format!("{MINIMAL}[train]\nepochs = \"ten\"\n"), "run.toml").unwrap_err();
    assert_eq!(err.line, Some(6));

    let err = RunConfig::parse(&format!("{MINIMAL}[train]\nepochs = 3\nbatch_size = 7\n"), "run.toml").unwrap_err();
    assert_eq!(err.field.as_deref(), Some("train.batch_size"));
    assert_eq!(err.line, Some(7));

    let text = format!("{MINIMAL}[model.encoder]\nd_model = 30\nheads = 4\n");
    let err = RunConfig::parse(&text, "run.toml").unwrap_err();
    assert_eq!(err.field.as_deref(), Some("model.encoder.d_model"));
    assert_eq!(err.line, Some(6));

    let err = RunConfig::parse(&format!("{MINIMAL}[train.optimizer]\nlr = -1.0\n"), "run.toml").unwrap_err();
    assert_eq!(err.field.as_deref(), Some("train.optimizer.lr"));
    assert_eq!(err.line, Some(6));

    let err = RunConfig::parse("[train]\nepochs = 3\n", "run.toml").unwrap_err();
    assert!(err.message.contains("data"), "{err}");
}

#[test]
fn preset_fills_tuple_and_explicit_keys_win() {
    let cfg = RunConfig::parse(&format!("preset = \"kinetics-necdrone\"\n{MINIMAL}"), "run.toml").unwrap();
    assert_eq!(
        hyper_tuple(&cfg.model, &cfg.train),
        serde_json::json!({"B": 64, "k": 53, "Q": 512, "alpha": 0.025, "lambda": 0.5})
    );
    let text = format!("preset = \"kinetics-necdrone\"\n{MINIMAL}[train]\nbatch_size = 16\n[model.encoder.dtab]\nqueue_capacity = 8\n");
    let cfg = RunConfig::parse(&text, "run.toml").unwrap();
    assert_eq!(
        hyper_tuple(&cfg.model, &cfg.train),
        serde_json::json!({"B": 16, "k": 53, "Q": 8, "alpha": 0.025, "lambda": 0.5})
    );

    let err = RunConfig::parse(&format!("preset = \"ucf-kinetics\"\n{MINIMAL}"), "run.toml").unwrap_err();
    assert_eq!(err.field.as_deref(), Some("preset"));
    assert_eq!(err.line, Some(1));
    assert!(err.message.contains("kinetics-necdrone"), "{err}");
}

#[test]
fn load_resolves_relative_paths_and_echo_is_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("# comment kept\nout = \"runs/a\"\n{MINIMAL}");
    let path = dir.path().join("run.toml");
    fs::write(&path, &text).unwrap();
    let (cfg, raw) = RunConfig::load(&path).unwrap();
    assert_eq!(raw, text);
    assert_eq!(cfg.data.source, dir.path().join("src.jsonl"));
    assert_eq!(cfg.out.unwrap(), dir.path().join("runs/a"));

    let run = dir.path().join("out");
    let echoed = echo_config(&raw, &run).unwrap();
    assert_eq!(fs::read(echoed).unwrap(), fs::read(&path).unwrap());
}

#[test]
fn synth_spec_files_are_strict() {
    let spec = SynthSpec::parse("theta_deg = 30.0\nseed = 4\n", "spec.toml").unwrap();
    assert_eq!((spec.theta_deg, spec.seed, spec.n_classes), (30.0, 4, 6));
    let err = SynthSpec::parse("theta = 30.0\n", "spec.toml").unwrap_err();
    assert_eq!(err.field.as_deref(), Some("theta"));
    let err = SynthSpec::parse("seed = 1\nn_classes = 1\n", "spec.toml").unwrap_err();
    assert_eq!(err.line, Some(2));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let (cfg, _) = RunConfig::load(&root.join("desk.toml")).unwrap();
    let spec = SynthSpec::parse(&fs::read_to_string(root.join("synth.toml")).unwrap(), "synth.toml").unwrap();
    assert_eq!(spec, SynthSpec::default());
    let (model, train) = desk_config(&spec);
    assert_eq!(cfg.model, model);
    assert_eq!(cfg.train, train);

    let (cfg, _) = RunConfig::load(&root.join("kinetics-necdrone.toml")).unwrap();
    assert_eq!(
        hyper_tuple(&cfg.model, &cfg.train),
        serde_json::json!({"B": 64, "k": 53, "Q": 512, "alpha": 0.025, "lambda": 0.5})
    );
    assert_eq!(cfg.model.encoder.feat_dim, 2048);
}
