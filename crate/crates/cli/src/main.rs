mod layout;
mod manifest;
mod steps;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use robustlab::experiment::{ConfigError, ExperimentConfig};
use robustlab::model::Regime;

use layout::RunDir;
use manifest::{sha256_bytes, RunManifest, StepRecord};
use steps::{AnalysisKind, Ctx};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error at {}: {}", if .0.pointer.is_empty() { "/" } else { .0.pointer.as_str() }, .0.message)]
    Config(#[from] ConfigError),
    #[error("missing input: {0}")]
    Missing(String),
    #[error("acceptance checks failed: {0}")]
    Checks(String),
    #[error(transparent)]
    Lib(#[from] robustlab::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Lib(robustlab::Error::Config(_)) => 2,
            CliError::Missing(_) => 3,
            CliError::Checks(_) => 4,
            _ => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "robustlab", version, about = "Compare standard and adversarially trained CNNs on a synthetic shape/texture world")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Architecture override.
    #[arg(long, global = true)]
    arch: Option<String>,
    /// Restrict to one training regime.
    #[arg(long, global = true, value_parser = parse_regime)]
    regime: Option<Regime>,
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    Regime::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Regime::ALL.iter().map(|r| r.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

#[derive(Subcommand)]
enum Command {
    /// Generate every dataset shard.
    GenData {
        /// Also export PNG images, masks and metadata.
        #[arg(long)]
        png: bool,
    },
    /// Train models (all regimes unless --regime).
    Train,
    /// Clean and PGD accuracy on the test shard.
    AttackEval,
    /// Without --kind: accuracy of the standard and adversarial models under
    /// every suite distortion. With --kind: write a distorted copy of a shard.
    Distort {
        /// scramble, gauss_noise, gauss_blur, contrast, bw or silhouette.
        #[arg(long)]
        kind: Option<String>,
        /// Grid size, sigma, contrast factor or threshold.
        #[arg(long)]
        value: Option<f32>,
        /// Severity 1..=3 for gauss_noise, gauss_blur and contrast.
        #[arg(long)]
        level: Option<usize>,
        /// Shard to distort.
        #[arg(long, default_value = "test")]
        shard: String,
        #[arg(long)]
        png: bool,
    },
    /// Run one analysis on the trained models.
    Analyze {
        #[arg(value_enum)]
        kind: AnalysisKind,
    },
    /// Render report/index.html from the analysis tables.
    Report,
    /// Full pipeline: data, all regimes, every analysis, checks and report.
    ReproAll,
}

fn load_config(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => CliError::Missing(p.display().to_string()),
                _ => e.into(),
            })?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    if let Some(a) = &common.arch {
        cfg.arch = a.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("ROBUSTLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Config(ConfigError {
            pointer: "ROBUSTLAB_THREADS".into(),
            message: format!("expected a positive integer, got {v:?}"),
        })
    })?;
    // Fails only if a pool already exists.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let cfg = load_config(&cli.common)?;
    let config_hash = sha256_bytes(serde_json::to_string(&cfg)?.as_bytes());
    let ctx = Ctx {
        regimes: cli.common.regime.map(|r| vec![r]).unwrap_or_else(|| Regime::ALL.to_vec()),
        regime_explicit: cli.common.regime.is_some(),
        run: RunDir::new(&cli.common.out),
        config_hash,
        cfg,
    };
    std::fs::create_dir_all(&ctx.run.root)?;
    let mut manifest = RunManifest::load(&ctx.run.manifest())?;
    manifest.config_hash = ctx.config_hash.clone();
    manifest.config = serde_json::to_value(&ctx.cfg)?;
    let mut save = |recs: Vec<StepRecord>| -> Result<(), CliError> {
        manifest.record(recs);
        manifest.save(&ctx.run.manifest())?;
        Ok(())
    };
    let seeds = ctx.cfg.seeds.clone();

    match cli.cmd {
        Command::GenData { png } => {
            for &s in &seeds {
                save(steps::gen_data(&ctx, s, png)?)?;
            }
        }
        Command::Train => save(steps::train_all(&ctx)?)?,
        Command::AttackEval => {
            for &s in &seeds {
                save(steps::attack_eval(&ctx, s)?)?;
            }
        }
        Command::Distort {
            kind,
            value,
            level,
            shard,
            png,
        } => {
            for &s in &seeds {
                let recs = match &kind {
                    None => steps::distortion_suite(&ctx, s)?,
                    Some(k) => steps::distort_shard(&ctx, s, &shard, &steps::parse_distortion(k, value, level)?, png)?,
                };
                save(recs)?;
            }
        }
        Command::Analyze { kind } => {
            for &s in &seeds {
                save(steps::analyze(&ctx, s, kind)?)?;
            }
        }
        Command::Report => save(steps::report(&ctx)?)?,
        Command::ReproAll => {
            for &s in &seeds {
                eprintln!("generating data for seed {s}");
                save(steps::gen_data(&ctx, s, false)?)?;
            }
            eprintln!("training {} models", seeds.len() * ctx.regimes.len());
            save(steps::train_all(&ctx)?)?;
            for &s in &seeds {
                eprintln!("analysing seed {s}");
                save(steps::attack_eval(&ctx, s)?)?;
                save(steps::distortion_suite(&ctx, s)?)?;
                for kind in AnalysisKind::ALL {
                    save(steps::analyze(&ctx, s, kind)?)?;
                }
            }
            let (results, rec) = steps::acceptance(&ctx)?;
            save(vec![rec])?;
            save(steps::report(&ctx)?)?;
            for r in &results {
                println!("{} {}: {} ({})", if r.passed { "PASS" } else { "FAIL" }, r.id, r.description, r.detail);
            }
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.id.as_str()).collect();
            if !failed.is_empty() {
                return Err(CliError::Checks(failed.join(",")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
