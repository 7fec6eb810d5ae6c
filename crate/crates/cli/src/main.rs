//! `lrcr`: synthetic data, training, inference, evaluation and gradient audits
//! for the left-right comparative recurrent stereo model.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{BaselineArg, EvalArgs, StageArg, TrainArgs};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "lrcr", version, about)]
struct Cli {
    /// Config file of `key = value` lines under `[section]` headers.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the top-level seed (data, split, model init).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `section.key=value` override, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic stereo samples.
    GenData {
        /// Number of samples; overrides `data.samples`.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train the siamese matching network.
    TrainMatcher {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train stage 1, stage 2, or both.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        stage: StageArg,
        /// Starting checkpoint; required for stage 2.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Use a trained matcher's costs instead of census.
        #[arg(long)]
        matcher: Option<PathBuf>,
    },
    /// Write final-step disparity maps for every sample.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        matcher: Option<PathBuf>,
        /// Recurrent steps; defaults to `stage2.steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Per-step metrics of a checkpoint or a classical baseline.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<BaselineArg>,
        #[arg(long)]
        matcher: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Write disparity, error and attention images per sample and step.
        #[arg(long)]
        dump_images: bool,
    },
    /// Finite-difference audit of every differentiable operation.
    CheckGrads {
        /// Comma-separated operation names; all by default.
        #[arg(long, value_delimiter = ',')]
        ops: Vec<String>,
        /// Overrides `audit.points`.
        #[arg(long)]
        points: Option<u64>,
        /// Negate every analytic gradient; the audit must then fail.
        #[arg(long, hide = true)]
        flip_gradients: bool,
    },
}

enum Outcome {
    Done,
    AuditFailed,
}

fn resolve(cli: &Cli) -> lrcr::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match &cli.command {
        Command::GenData { n: Some(n) } => cfg.samples = *n,
        Command::CheckGrads { points: Some(p), .. } => cfg.audit_points = *p,
        _ => {}
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> lrcr::Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| lrcr::Error::Config("--out is required for this command".into()))
}

fn run(cli: &Cli) -> lrcr::Result<Outcome> {
    let cfg = resolve(cli)?;
    eprintln!("# resolved config\n{}", cfg.render());
    match &cli.command {
        Command::GenData { .. } => commands::gen_data(&cfg, out_dir(cli)?)?,
        Command::TrainMatcher { data } => commands::train_matcher_cmd(&cfg, data, out_dir(cli)?)?,
        Command::Train {
            data,
            stage,
            init,
            matcher,
        } => commands::train(
            &cfg,
            &TrainArgs {
                data,
                out: out_dir(cli)?,
                stage: *stage,
                init: init.as_deref(),
                matcher: matcher.as_deref(),
            },
        )?,
        Command::Infer {
            data,
            checkpoint,
            matcher,
            steps,
        } => commands::infer(
            &cfg,
            data,
            checkpoint,
            matcher.as_deref(),
            steps.unwrap_or(cfg.stage2.steps),
            out_dir(cli)?,
        )?,
        Command::Eval {
            data,
            checkpoint,
            baseline,
            matcher,
            steps,
            dump_images,
        } => {
            commands::eval(
                &cfg,
                &EvalArgs {
                    data,
                    out: out_dir(cli)?,
                    checkpoint: checkpoint.as_deref(),
                    baseline: *baseline,
                    matcher: matcher.as_deref(),
                    steps: steps.unwrap_or(cfg.stage2.steps),
                    dump_images: *dump_images,
                },
            )?;
        }
        Command::CheckGrads { ops, flip_gradients, .. } => {
            if !commands::check_grads(&cfg, ops, *flip_gradients)? {
                return Ok(Outcome::AuditFailed);
            }
        }
    }
    Ok(Outcome::Done)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::AuditFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
