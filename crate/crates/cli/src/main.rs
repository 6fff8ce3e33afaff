use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gust::pipeline::{emit_report, run_all, run_stage, ExperimentConfig, PipelineError, Profile, RunManifest, Stage};

#[derive(Parser)]
#[command(name = "gust", version, about = "Manufacturing uncertainty of metamaterial unit cells")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML file overlaid on the profile defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base seed (overrides the config)
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "desk")]
    profile: Profile,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    Synth,
    Pretrain,
    Finetune,
    Sample,
    Baseline,
    Homogenize,
    Evaluate,
    /// Summary tables, p-values and KDE plots from a finished evaluation
    Report,
    /// Every stage in order, then the report
    All,
    /// Print the resolved configuration as TOML
    Config,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::Synth => Stage::Synth,
            Command::Pretrain => Stage::Pretrain,
            Command::Finetune => Stage::Finetune,
            Command::Sample => Stage::Sample,
            Command::Baseline => Stage::Baseline,
            Command::Homogenize => Stage::Homogenize,
            Command::Evaluate => Stage::Evaluate,
            Command::Report | Command::All | Command::Config => return None,
        })
    }
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path, cli.profile)?,
        None => ExperimentConfig::for_profile(cli.profile),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads() -> Result<(), PipelineError> {
    let Ok(raw) = std::env::var("GUST_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| PipelineError::Config(format!("GUST_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| PipelineError::Config(e.to_string()))
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    init_threads()?;
    let cfg = resolve(cli)?;
    if let Some(stage) = cli.command.stage() {
        let manifest = RunManifest::load(&cfg.out_dir)?;
        run_stage(stage, &cfg, manifest)?;
        return Ok(());
    }
    match cli.command {
        Command::Config => print!("{}", cfg.to_toml_string()),
        Command::Report => {
            let manifest = RunManifest::load(&cfg.out_dir)?;
            if !manifest.config_hash.is_empty() && manifest.config_hash != cfg.hash() {
                return Err(PipelineError::ConfigMismatch {
                    expected: cfg.hash(),
                    found: manifest.config_hash,
                });
            }
            for path in emit_report(&cfg.out_dir, &manifest)? {
                println!("{}", path.display());
            }
        }
        Command::All => {
            let manifest = run_all(&cfg)?;
            for path in emit_report(&cfg.out_dir, &manifest)? {
                println!("{}", path.display());
            }
        }
        _ => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
