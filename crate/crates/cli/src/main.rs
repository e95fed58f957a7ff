use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use serde_json::json;
use transferattn::batch::Dataset;
use transferattn::checkpoint;
use transferattn::config::{echo_config, ConfigError, RunConfig};
use transferattn::features::inspect;
use transferattn::gradcheck::{run_scope, Scope};
use transferattn::manifest::Manifest;
use transferattn::synth::{write_dataset, SynthSpec};
use transferattn::trainer::{evaluate, hyper_tuple, run_ablation, train, Protocol, RunCache};

/// Transferability-guided attention for video domain adaptation on precomputed features.
#[derive(Parser)]
#[command(name = "transferattn", version)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `out` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a labeled manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Write one pooled feature file per video here.
        #[arg(long)]
        export_features: Option<PathBuf>,
    },
    /// Generate a synthetic two-domain dataset.
    Synth {
        /// TOML spec; defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value = "all", value_parser = parse_scopes)]
        scope: ScopeArg,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 25)]
        instances: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
    /// Run one ablation protocol and emit its table.
    Ablate {
        #[arg(long)]
        protocol: Protocol,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Feature file utilities.
    Features {
        #[command(subcommand)]
        command: FeaturesCommand,
    },
}

#[derive(Subcommand)]
enum FeaturesCommand {
    /// Print header fields and checksum status.
    Inspect { path: PathBuf },
}

#[derive(Clone)]
struct ScopeArg(Vec<Scope>);

fn parse_scopes(s: &str) -> Result<ScopeArg, String> {
    if s == "all" {
        return Ok(ScopeArg(Scope::ALL.to_vec()));
    }
    s.parse::<Scope>().map(|sc| ScopeArg(vec![sc]))
}

enum Failure {
    Invalid(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Invalid(e.to_string())
    }
}

impl From<transferattn::Error> for Failure {
    fn from(e: transferattn::Error) -> Self {
        match e {
            transferattn::Error::Config(_) | transferattn::Error::Usage(_) => Failure::Invalid(e.to_string()),
            other => Failure::Runtime(other.into()),
        }
    }
}

type CmdResult = Result<(), Failure>;

/// Lists every file under `dir` with its size into `files.json`.
fn write_file_manifest(dir: &Path) -> anyhow::Result<()> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, u64)>) -> std::io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).unwrap_or(&path).to_string_lossy().replace('\\', "/");
                if rel != "files.json" {
                    out.push((rel, fs::metadata(&path)?.len()));
                }
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let list: Vec<_> = files.iter().map(|(p, n)| json!({"path": p, "bytes": n})).collect();
    fs::write(dir.join("files.json"), serde_json::to_string_pretty(&list)? + "\n")?;
    Ok(())
}

fn output_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, Failure> {
    flag.or_else(|| cfg.out.clone())
        .ok_or_else(|| Failure::Invalid("no output directory: pass --out or set `out` in the config".into()))
}

fn cmd_train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> CmdResult {
    let (mut cfg, text) = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let out = output_dir(out, &cfg)?;
    let data = cfg.load_data()?;
    echo_config(&text, &out).context("writing config echo")?;
    println!("hyperparameters {}", hyper_tuple(&cfg.model, &cfg.train));
    let outcome = train(&cfg.model, &cfg.train, &data, Some(&out))?;
    write_file_manifest(&out)?;
    let summary = json!({
        "seed": cfg.train.seed,
        "epochs": outcome.epochs.len(),
        "final_accuracy": outcome.final_eval.as_ref().map(|e| e.accuracy),
        "best_accuracy": outcome.best_eval.as_ref().map(|e| e.accuracy),
        "best_epoch": outcome.best_epoch,
        "trainable_params": outcome.trainable_params,
        "param_hash": outcome.param_hash,
        "out": out,
    });
    println!("{summary}");
    Ok(())
}

fn cmd_eval(ckpt: &Path, manifest: &Path, export: Option<&Path>) -> CmdResult {
    let (model, meta) = checkpoint::load(ckpt)?;
    let m = Manifest::load(manifest).map_err(transferattn::Error::from)?;
    let data = Dataset::from_manifest(&m)?;
    if data.feat_dim != model.cfg.encoder.feat_dim || data.n_classes != model.cfg.n_classes {
        return Err(Failure::Invalid(format!(
            "manifest has feat_dim {} and {} classes, checkpoint expects {} and {}",
            data.feat_dim, data.n_classes, model.cfg.encoder.feat_dim, model.cfg.n_classes
        )));
    }
    let report = evaluate(&model, &data, export)?;
    println!(
        "{}",
        json!({
            "accuracy": report.accuracy,
            "per_class": report.per_class,
            "videos": report.n_videos,
            "checkpoint_epoch": meta.epoch,
        })
    );
    Ok(())
}

fn cmd_synth(spec: Option<&Path>, out: &Path) -> CmdResult {
    let spec = match spec {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let spec = SynthSpec::parse(&text, &p.display().to_string())?;
            fs::create_dir_all(out).context("creating output directory")?;
            fs::write(out.join("spec.toml"), &text).context("writing spec echo")?;
            spec
        }
        None => SynthSpec::default(),
    };
    let paths = write_dataset(&spec, out)?;
    write_file_manifest(out)?;
    println!(
        "{}",
        json!({
            "source": paths.source,
            "target_train": paths.target_train,
            "target_test": paths.target_test,
        })
    );
    Ok(())
}

fn cmd_gradcheck(scopes: &[Scope], tol: f64, instances: usize, seed: u64) -> CmdResult {
    if !(tol > 0.0) || instances == 0 {
        return Err(Failure::Invalid("--tol must be > 0 and --instances >= 1".into()));
    }
    let mut failed = 0;
    for &scope in scopes {
        for r in run_scope(scope, instances, seed).map_err(transferattn::Error::from)? {
            let ok = r.max_rel_err <= tol;
            failed += usize::from(!ok);
            println!(
                "{} {scope}/{} max_rel_err={:.3e} coords={}",
                if ok { "PASS" } else { "FAIL" },
                r.name,
                r.max_rel_err,
                r.coords_checked
            );
        }
    }
    if failed > 0 {
        return Err(Failure::Runtime(anyhow!("{failed} gradient checks exceeded tolerance {tol:e}")));
    }
    Ok(())
}

fn cmd_ablate(protocol: Protocol, config: &Path, out: Option<PathBuf>) -> CmdResult {
    let (cfg, text) = RunConfig::load(config)?;
    let out = output_dir(out, &cfg)?;
    let data = cfg.load_data()?;
    echo_config(&text, &out).context("writing config echo")?;
    let table = run_ablation(
        protocol,
        &cfg.model,
        &cfg.train,
        &data,
        &cfg.ablation.seeds,
        &mut RunCache::new(),
        Some(&out),
    )?;
    write_file_manifest(&out)?;
    print!("{}", table.to_tsv());
    Ok(())
}

fn cmd_inspect(path: &Path) -> CmdResult {
    let info = inspect(path).map_err(transferattn::Error::from)?;
    println!("{}", serde_json::to_string_pretty(&info).map_err(anyhow::Error::from)?);
    if !info.checksum_ok {
        return Err(Failure::Runtime(anyhow!("payload checksum mismatch")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Train { config, seed, out } => cmd_train(&config, seed, out),
        Command::Eval {
            checkpoint,
            manifest,
            export_features,
        } => cmd_eval(&checkpoint, &manifest, export_features.as_deref()),
        Command::Synth { spec, out } => cmd_synth(spec.as_deref(), &out),
        Command::Gradcheck {
            scope,
            tol,
            instances,
            seed,
        } => cmd_gradcheck(&scope.0, tol, instances, seed),
        Command::Ablate { protocol, config, out } => cmd_ablate(protocol, &config, out),
        Command::Features {
            command: FeaturesCommand::Inspect { path },
        } => cmd_inspect(&path),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
