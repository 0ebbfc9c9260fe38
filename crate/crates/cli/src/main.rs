use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ct_core::pipeline::{
    collect_stage, eval_stage, finetune_stage, parse_assignment, parse_config, pretrain_stage,
    report_stage, write_resolved_config, PipelineConfig, RunDir,
};
use ct_core::training::InitMode;
use ct_core::CtError;

#[derive(Debug, Parser)]
#[command(name = "ct", version, about = "Control transformer pretraining and policy finetuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run directory shared by all stages.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,

    /// Overrides `seed` (and the CT_SEED environment variable).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Dotted `key=value` override, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Single-threaded, bit-reproducible numerics.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Roll out the behavior policies and write the datasets.
    Collect,
    /// Self-supervised pretraining on the pretraining dataset.
    Pretrain,
    /// Policy learning on each finetuning task.
    Finetune {
        /// Start from the pretrained checkpoint or from a fresh model.
        #[arg(long, value_enum)]
        init: Option<Init>,
    },
    /// Evaluate every finetuned policy.
    Eval,
    /// Summary table, curves and bar chart from stored results.
    Report,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Init {
    Scratch,
    Checkpoint,
}

fn error_kind(e: &CtError) -> &'static str {
    match e {
        CtError::Config(_) => "ConfigError",
        CtError::Schema(_) => "SchemaError",
        CtError::Type { .. } => "TypeError",
        CtError::Storage { .. } => "StorageError",
        CtError::FormatVersion { .. } => "FormatVersionError",
        CtError::Integrity(_) => "IntegrityError",
        CtError::UnknownTask(_) => "UnknownTask",
        CtError::EmptySubset => "EmptySubset",
        CtError::NoEligibleEpisode { .. } => "NoEligibleEpisode",
        CtError::DivisionByZero(_) => "DivisionByZero",
        CtError::Json(_) => "ParseError",
        _ => "RuntimeError",
    }
}

fn resolve(cli: &Cli) -> Result<PipelineConfig, CtError> {
    let mut overrides = cli
        .overrides
        .iter()
        .map(|s| parse_assignment(s))
        .collect::<Result<Vec<_>, _>>()?;
    let env_seed = match std::env::var("CT_SEED") {
        Ok(s) => Some(
            s.trim()
                .parse::<u64>()
                .map_err(|_| CtError::Config(format!("CT_SEED `{s}` is not an unsigned integer")))?,
        ),
        Err(_) => None,
    };
    if let Some(seed) = cli.seed.or(env_seed) {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if cli.deterministic {
        overrides.push(("deterministic".into(), "true".into()));
    }
    if let Command::Finetune { init: Some(init) } = &cli.command {
        let v = match init {
            Init::Scratch => InitMode::Scratch,
            Init::Checkpoint => InitMode::Checkpoint,
        };
        overrides.push(("training.finetune.init".into(), serde_json::to_string(&v)?));
    }
    parse_config(cli.config.as_deref(), &overrides)
}

fn run(cli: &Cli) -> Result<(), CtError> {
    let cfg = resolve(cli)?;
    if cfg.deterministic {
        // Read by the tensor backend on every parallel kernel launch.
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    let dir = RunDir::new(&cli.out);
    write_resolved_config(&cfg, &dir)?;
    match cli.command {
        Command::Collect => collect_stage(&cfg, &dir),
        Command::Pretrain => pretrain_stage(&cfg, &dir).map(|ck| {
            log::info!("pretrained checkpoint {}", ck.id().unwrap_or_default());
        }),
        Command::Finetune { .. } => finetune_stage(&cfg, &dir),
        Command::Eval => eval_stage(&cfg, &dir).map(|results| {
            for r in results {
                println!(
                    "{}\t{}\t{:.3}\t{:.4}",
                    r.method, r.result.task, r.result.mean, r.result.normalized_mean
                );
            }
        }),
        Command::Report => report_stage(&cfg, &dir),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = serde_json::json!({ "error": error_kind(&e), "message": e.to_string() });
            eprintln!("{msg}");
            ExitCode::from(match e {
                CtError::Config(_) | CtError::Schema(_) | CtError::Type { .. } => 2,
                _ => 1,
            })
        }
    }
}
