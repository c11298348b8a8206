//! Argument parsing and dispatch. Precedence for seed, output directory and
//! thread count: flags, then environment, then the config file.

use std::path::{Path, PathBuf};

use blockdance_core::{Error, Result};
use clap::{Parser, Subcommand};

use crate::commands::{self, Context, Outcome};
use crate::config::{Overrides, RunConfig, ScheduleKind};

#[derive(Debug, Parser)]
#[command(name = "blockdance", version, about = "Training-free block-level feature caching for diffusion transformers")]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample one latent and write it with its trace.
    Generate {
        /// Overrides schedule.kind.
        #[arg(long, value_enum)]
        schedule: Option<ScheduleKind>,
        /// Overrides schedule.group_size.
        #[arg(long)]
        group_size: Option<usize>,
    },
    /// Compare cached schedules against the full run for each N and seed.
    Bench,
    /// Record block features and write the similarity and PCA tables.
    Profile {
        /// Re-analyze an existing feature log instead of sampling.
        #[arg(long)]
        from_log: Option<PathBuf>,
    },
    /// Train the decision network and compare it with fixed schedules.
    TrainPolicy {
        /// Continue from the checkpoint of the same configuration if present.
        #[arg(long)]
        resume: bool,
    },
    /// Validate a trace file and print its cost summary.
    InspectTrace {
        trace: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

/// Loads the configuration and applies environment and flag overrides.
pub fn resolve_config(cli: &Cli, env: impl Fn(&str) -> Option<String>) -> Result<(RunConfig, PathBuf)> {
    let (mut cfg, base) = match &cli.config {
        Some(path) => {
            let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            (RunConfig::load(path)?, base.to_path_buf())
        }
        None => (RunConfig::default(), PathBuf::from(".")),
    };
    let flags = Overrides { seed: cli.seed, out: cli.out.clone(), threads: cli.threads };
    cfg.apply(&flags.over(Overrides::from_env(env)?));
    if let Command::Generate { schedule, group_size } = &cli.command {
        if let Some(k) = schedule {
            cfg.schedule.kind = *k;
        }
        if let Some(n) = group_size {
            cfg.schedule.group_size = *n;
        }
    }
    Ok((cfg, base))
}

pub fn run(cli: &Cli, env: impl Fn(&str) -> Option<String>) -> Result<Outcome> {
    let (cfg, base) = resolve_config(cli, env)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let ctx = Context::new(cfg, &base)?;
    log::info!("config {} ({})", ctx.hash, ctx.cfg.out.display());
    pool.install(|| match &cli.command {
        Command::Generate { .. } => commands::generate(&ctx),
        Command::Bench => commands::bench(&ctx),
        Command::Profile { from_log } => commands::profile(&ctx, from_log.as_deref()),
        Command::TrainPolicy { resume } => commands::train_policy(&ctx, *resume),
        Command::InspectTrace { trace, json } => commands::inspect_trace(&ctx, trace, *json),
    })
}

/// 0 on success, 2 for invalid input or configuration, 1 otherwise.
pub fn exit_code(result: &Result<Outcome>) -> i32 {
    match result {
        Ok(_) => 0,
        Err(e) if e.is_config() => 2,
        Err(_) => 1,
    }
}
