// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lofit::commands::{self, Context};
use lofit::experiment::threads_from_env;
use lofit::{Error, ExperimentConfig, Result};

/// Localized fine-tuning of attention-head representations on toy tasks.
///
/// Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
#[derive(Parser, Debug)]
#[command(name = "lofit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (JSON). Omitted means all defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Head-set file (repeatable for `analyze`).
    #[arg(long, global = true)]
    heads: Vec<PathBuf>,
    /// Intervention file.
    #[arg(long, global = true)]
    intervention: Option<PathBuf>,
    /// Output directory; overrides `paths.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run with this single seed instead of the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Train the base model and write its checkpoint.
    Pretrain,
    /// Select heads and write `heads.json`.
    Select,
    /// Tune offsets on a head set and write `intervention.json`.
    Tune,
    /// Evaluate without and (optionally) with an intervention.
    Eval,
    /// Select, tune and evaluate over the configured head percentages.
    SweepK,
    /// Tune on one task using heads selected on another.
    Transfer,
    /// Logit lens and head-set similarity.
    Analyze,
}

fn one_heads(cli: &Cli, ctx: &Context) -> Result<Option<PathBuf>> {
    match cli.heads.as_slice() {
        [] => Ok(None),
        [p] => Ok(Some(p.clone())),
        _ => Err(Error::Config(format!("this command takes one --heads file, got {}", cli.heads.len()))),
    }
    .map(|p| p.or_else(|| Some(ctx.path("heads.json")).filter(|p| p.exists())))
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let ctx = Context::new(cfg, cli.out.clone(), cli.seed, threads_from_env()?)?;
    match cli.command {
        Command::Pretrain => {
            let r = commands::pretrain(&ctx)?;
            for g in &r.gate {
                eprintln!("{}: probe EM {:.3}, zero-shot {:.3}, gate {}", g.task, g.probe_em, g.zero_shot, if g.passed { "passed" } else { "FAILED" });
            }
        }
        Command::Select => {
            let f = commands::select(&ctx)?;
            eprintln!("{} heads by {}: {:?}", f.k, f.method, f.heads);
        }
        Command::Tune => {
            let heads = one_heads(cli, &ctx)?.ok_or_else(|| Error::Config("tune needs --heads (or heads.json in the output directory)".into()))?;
            let iv = commands::tune(&ctx, &heads)?;
            eprintln!("tuned offsets for {} heads", iv.len());
        }
        Command::Eval => {
            let r = commands::eval(&ctx, cli.intervention.as_deref())?;
            for a in &r.aggregate {
                eprintln!("{} {}: em {:?} mc1 {:?} mc2 {:?}", a.condition, a.task, a.em, a.mc1, a.mc2);
            }
        }
        Command::SweepK => {
            let r = commands::sweep_k(&ctx)?;
            for a in &r.aggregate {
                eprintln!("{} K={:?}: em {:?} mc1 {:?}", a.condition, a.k, a.em, a.mc1);
            }
        }
        Command::Transfer => {
            let heads = match cli.heads.as_slice() {
                [] => None,
                [p] => Some(p.as_path()),
                _ => return Err(Error::Config("transfer takes at most one --heads file".into())),
            };
            let r = commands::transfer(&ctx, heads)?;
            for a in &r.aggregate {
                eprintln!("{} {} <- {:?}: em {:?} mc1 {:?}", a.condition, a.task, a.source, a.em, a.mc1);
            }
        }
        Command::Analyze => {
            let a = commands::analyze(&ctx, cli.intervention.as_deref(), &cli.heads)?;
            eprintln!("analyzed {} head sets; param_count {:?}", a.head_sets.len(), a.param_count);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lofit: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
