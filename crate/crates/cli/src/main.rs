use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use memguard::attack::{inference_accuracy, AttackKind};
use memguard::config::RunConfig;
use memguard::eval::reports_to_csv;
use memguard::memguard::{MemGuard, NoiseMethod};
use memguard::pipeline::{self as pl, ArtifactPaths, Pipeline};
use memguard::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_DEPENDENCY: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// Confidence-score noise defense against membership inference.
#[derive(Debug, Parser)]
#[command(name = "memguard", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Artifact directory; overrides `output.dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Derive every seed in the config from this value.
    #[arg(long, global = true)]
    seed_override: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the dataset, split it into D1..D4 and write the CSVs and manifest.
    GenData,
    /// Train one model: target, defense, shadow, attack:<kind> or all.
    Train { which: String },
    /// Sanitize the confidence vectors of a CSV of queries.
    Sanitize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        epsilon: f64,
        /// Output CSV of noisy confidence vectors [default: <out>/sanitized.csv].
        #[arg(long)]
        output: Option<PathBuf>,
        /// Also write a per-query policy log.
        #[arg(long)]
        policy_log: Option<PathBuf>,
    },
    /// Run every configured attack at every configured budget.
    Evaluate,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        let code = match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
            Some(Error::Config(_)) => EXIT_CONFIG,
            Some(Error::MissingArtifact { .. }) => EXIT_DEPENDENCY,
            _ => EXIT_RUNTIME,
        };
        Self { code, err }
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        anyhow::Error::from(err).into()
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let path = cli.config.as_ref().ok_or_else(|| Failure {
        code: EXIT_CONFIG,
        err: anyhow::anyhow!("--config <path> is required"),
    })?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed_override {
        cfg.override_seeds(seed);
    }
    let dir = cli
        .out
        .clone()
        .or_else(|| cfg.output.as_ref().map(|o| o.dir.clone()))
        .unwrap_or_else(|| PathBuf::from("out"));
    let paths = ArtifactPaths::new(dir);
    match cli.command {
        Command::GenData => gen_data(&cfg, &paths),
        Command::Train { which } => train(&cfg, &paths, &which),
        Command::Sanitize {
            input,
            epsilon,
            output,
            policy_log,
        } => sanitize(&cfg, &paths, &input, epsilon, output, policy_log),
        Command::Evaluate => evaluate(&cfg, &paths),
    }
}

fn gen_data(cfg: &RunConfig, paths: &ArtifactPaths) -> Result<(), Failure> {
    let splits = pl::make_splits(cfg)?;
    let manifest = pl::write_splits(&splits, cfg, paths)?;
    println!(
        "wrote d1..d4 to {} (sizes {:?}, seed {})",
        paths.dir.display(),
        manifest.sizes,
        manifest.seed
    );
    Ok(())
}

fn train(cfg: &RunConfig, paths: &ArtifactPaths, which: &str) -> Result<(), Failure> {
    match which {
        "target" => train_target(cfg, paths),
        "defense" => train_defense(cfg, paths),
        "shadow" => train_shadow(cfg, paths),
        "all" => {
            if !paths.manifest().exists() {
                gen_data(cfg, paths)?;
            }
            train_target(cfg, paths)?;
            train_defense(cfg, paths)?;
            train_shadow(cfg, paths)?;
            for kind in cfg.eval.attack_kinds()? {
                train_attack(cfg, paths, kind)?;
            }
            Ok(())
        }
        other => match other.strip_prefix("attack:") {
            Some(kind) => train_attack(cfg, paths, kind.parse::<AttackKind>()?),
            None => Err(Failure {
                code: EXIT_CONFIG,
                err: anyhow::anyhow!("unknown model `{other}`; expected target, defense, shadow, attack:<kind> or all"),
            }),
        },
    }
}

fn train_target(cfg: &RunConfig, paths: &ArtifactPaths) -> Result<(), Failure> {
    let splits = pl::read_splits(paths)?;
    let (trained, test) = pl::fit_target(cfg, &splits)?;
    pl::save_model(&trained.classifier.model, &paths.target())?;
    println!("target train_accuracy={:.4} test_accuracy={test:.4}", trained.train_accuracy);
    Ok(())
}

fn train_defense(cfg: &RunConfig, paths: &ArtifactPaths) -> Result<(), Failure> {
    let splits = pl::read_splits(paths)?;
    let target = pl::read_target(paths)?;
    let (trained, n) = pl::fit_defense(cfg, &splits, &target)?;
    pl::save_model(&trained.classifier.model, &paths.defense())?;
    println!("defense train_accuracy={:.4} training_set={n}", trained.train_accuracy);
    Ok(())
}

fn train_shadow(cfg: &RunConfig, paths: &ArtifactPaths) -> Result<(), Failure> {
    let splits = pl::read_splits(paths)?;
    let (trained, test) = pl::fit_shadow(cfg, &splits)?;
    pl::save_model(&trained.classifier.model, &paths.shadow())?;
    println!("shadow train_accuracy={:.4} test_accuracy={test:.4}", trained.train_accuracy);
    Ok(())
}

fn train_attack(cfg: &RunConfig, paths: &ArtifactPaths, kind: AttackKind) -> Result<(), Failure> {
    let splits = pl::read_splits(paths)?;
    let target = match kind {
        AttackKind::Nsh => Some(pl::read_target(paths)?),
        _ => pl::read_target(paths).ok(),
    };
    let shadow = match kind {
        AttackKind::Rg | AttackKind::Nsh => None,
        _ => Some(pl::read_shadow(paths)?),
    };
    let attack = pl::fit_attack(cfg, kind, &splits, target.as_ref(), shadow.as_ref())?;
    pl::save_attack(&attack, paths)?;
    match &target {
        Some(t) => {
            let acc = inference_accuracy(&attack, t, &splits.d1, &splits.d4)?;
            println!("attack {kind} undefended_inference_accuracy={acc:.4}");
        }
        None => println!("attack {kind} trained"),
    }
    Ok(())
}

fn sanitize(
    cfg: &RunConfig,
    paths: &ArtifactPaths,
    input: &PathBuf,
    epsilon: f64,
    output: Option<PathBuf>,
    policy_log: Option<PathBuf>,
) -> Result<(), Failure> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!("epsilon must be finite and non-negative, got {epsilon}")).into());
    }
    let target = pl::read_target(paths)?;
    let defense = pl::read_defense(paths)?;
    let params = cfg.memguard.params()?;
    let guard = MemGuard::new(&target, &defense, &params, cfg.memguard.mechanism_seed)
        .with_quant_decimals(cfg.memguard.quant_decimals)
        .with_method(cfg.memguard.method()?);
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let queries = pl::parse_queries(&text, target.input_dim())?;

    let mut out = String::new();
    let mut log = String::from("query_id,converged,p,l1_norm_r,g_s,g_s_plus_r,applied\n");
    for (i, x) in queries.iter().enumerate() {
        let (s, policy) = guard.sanitize(x, epsilon).with_context(|| format!("query row {}", i + 1))?;
        let cells: Vec<String> = s.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
        let _ = writeln!(
            log,
            "{i},{},{},{},{},{},{}",
            u8::from(policy.phase1_converged),
            policy.p,
            policy.r.l1_norm(),
            policy.g_true,
            policy.g_noisy,
            u8::from(policy.applied)
        );
    }
    fs::create_dir_all(&paths.dir).map_err(anyhow::Error::from)?;
    let output = output.unwrap_or_else(|| paths.dir.join("sanitized.csv"));
    fs::write(&output, out).with_context(|| format!("writing {}", output.display()))?;
    if let Some(log_path) = policy_log {
        fs::write(&log_path, log).with_context(|| format!("writing {}", log_path.display()))?;
    }
    println!("sanitized {} queries at epsilon {epsilon} into {}", queries.len(), output.display());
    Ok(())
}

fn evaluate(cfg: &RunConfig, paths: &ArtifactPaths) -> Result<(), Failure> {
    let pipeline = Pipeline::load(cfg, paths)?;
    let reports = pipeline.sweep()?;
    fs::write(paths.report(), reports_to_csv(&reports)).map_err(anyhow::Error::from)?;
    println!("wrote {} rows to {}", reports.len(), paths.report().display());
    let memguard_rows = cfg.memguard.method()? == NoiseMethod::MemGuard;
    if memguard_rows && reports.iter().any(|r| r.label_loss != 0.0) {
        let err: anyhow::Error = anyhow::anyhow!("a sanitized query changed its predicted label");
        return Err(Failure {
            code: EXIT_RUNTIME,
            err,
        });
    }
    Ok(())
}
