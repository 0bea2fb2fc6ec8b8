use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use srwgan::blob::{read_json, to_json, write_json};
use srwgan::commands::{self, ClassScope};
use srwgan::config::{Overrides, RunConfig};
use srwgan::error::{Error, Result};
use srwgan::grid::{thread_count, GridSpec};
use srwgan::report::write_text;
use srwgan_core::data::{SyntheticSpec, TaskMode};

#[derive(Parser)]
#[command(name = "srwgan", version, about = "Feature-generating any-shot learning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Common {
    /// Run config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<TaskMode>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a converted dataset directory and print its summary.
    ConvertCheck {
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic linear world as a dataset directory.
    GenSynthetic {
        /// Synthetic world spec (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, evaluate and write a run directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        n_synth: Option<usize>,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, once per `--n-synth` value.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        n_synth: Vec<usize>,
    },
    /// Write synthetic features of a checkpoint as CSV.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        n_synth: usize,
        #[arg(long, value_parser = parse_scope, default_value = "unseen")]
        classes: ClassScope,
    },
    /// Check bias-free transfer on seeded gram-matched linear worlds.
    VerifyLemma {
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        #[arg(long, value_delimiter = ',', default_values_t = [3, 4, 5, 6, 7, 8])]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and rank every point of a hyperparameter grid.
    Gridsearch {
        #[command(flatten)]
        common: Common,
        /// Grid spec (JSON).
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        n_synth: Option<usize>,
    },
}

fn parse_mode(s: &str) -> std::result::Result<TaskMode, String> {
    TaskMode::parse(s).ok_or_else(|| format!("unknown mode {s} (expected zsl, gzsl, fsl, tzsl or tgzsl)"))
}

fn parse_scope(s: &str) -> std::result::Result<ClassScope, String> {
    match s {
        "seen" => Ok(ClassScope::Seen),
        "unseen" => Ok(ClassScope::Unseen),
        "all" => Ok(ClassScope::All),
        _ => Err(format!("unknown class scope {s}")),
    }
}

fn load_config(common: &Common, n_synth: Option<usize>, dataset: Option<PathBuf>) -> Result<RunConfig> {
    let path = common.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    cfg.apply(&Overrides {
        dataset,
        mode: common.mode,
        shots: common.shots,
        seed: common.seed,
        n_synth,
        out: common.out.clone(),
    });
    cfg.validate()?;
    Ok(cfg)
}

fn emit<T: Serialize>(value: &T) {
    print!("{}", to_json(value));
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ConvertCheck { dataset, out } => {
            let summary = commands::cmd_convert_check(&dataset)?;
            if let Some(out) = out {
                write_json(&out, &summary)?;
            }
            emit(&summary);
        }
        Command::GenSynthetic { config, seed, out } => {
            let mut spec: SyntheticSpec = read_json(&config)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            emit(&commands::cmd_gen_synthetic(&spec, &out)?);
        }
        Command::Train { common, dataset, n_synth, resume } => {
            let cfg = load_config(&common, n_synth, dataset)?;
            let outcome = commands::cmd_train(&cfg, resume.as_deref())?;
            emit(&serde_json::json!({ "run_dir": outcome.run_dir, "eval": outcome.summary.eval }));
        }
        Command::Eval { common, checkpoint, dataset, n_synth } => {
            let cfg = common.config.as_ref().map(|p| RunConfig::load(p)).transpose()?;
            let mut inputs = commands::eval_inputs(&checkpoint, cfg.as_ref(), dataset.as_deref())?;
            if let Some(s) = common.seed {
                inputs.settings.seed = s;
            }
            let mode = common.mode.unwrap_or(inputs.checkpoint.config.mode);
            let reports = commands::eval_sweep(&inputs, mode, common.shots, &n_synth)?;
            let dir = common.out.or_else(|| checkpoint.parent().map(|p| p.to_path_buf())).unwrap_or_default();
            commands::write_eval(&dir, &reports)?;
            emit(&reports);
        }
        Command::Synth { common, checkpoint, dataset, n_synth, classes } => {
            let cfg = common.config.as_ref().map(|p| RunConfig::load(p)).transpose()?;
            let inputs = commands::eval_inputs(&checkpoint, cfg.as_ref(), dataset.as_deref())?;
            let seed = common.seed.unwrap_or(inputs.settings.seed);
            let csv = commands::synth_csv(&inputs, classes, n_synth, seed)?;
            match common.out {
                Some(out) => write_text(&out, &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::VerifyLemma { seeds, dims, seed, out } => {
            let sweep = commands::cmd_verify_lemma(seed, seeds, &dims)?;
            let brief = serde_json::json!({
                "trials": sweep.trials.len(),
                "max_gap": sweep.max_gap,
                "violated_detected": sweep.violated_detected,
            });
            match out {
                Some(out) => {
                    write_json(&out, &sweep)?;
                    emit(&brief);
                }
                None => emit(&sweep),
            }
        }
        Command::Gridsearch { common, grid, n_synth } => {
            let cfg = load_config(&common, n_synth, None)?;
            let spec: GridSpec = read_json(&grid)?;
            let (dir, results) = commands::cmd_gridsearch(&cfg, &spec, thread_count())?;
            let best = results.first().map(|r| r.point);
            emit(&serde_json::json!({ "dir": dir, "runs": results.len(), "best": best }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{}", to_json(&serde_json::json!({ "error": "usage", "message": e.to_string() })));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprint!("{}", to_json(&serde_json::json!({ "error": e.kind(), "message": e.to_string() })));
            ExitCode::from(2)
        }
    }
}
