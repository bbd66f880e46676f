//! `flowpref` command-line front end.
//!
//! Subcommands map one-to-one onto pipeline stages and communicate only
//! through files under the output directory; `pipeline` runs them all.

pub mod config;
pub mod error;
pub mod stages;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{Overrides, RunConfig};
use crate::error::{CliError, Result};
use crate::stages::Context;

#[derive(Debug, Parser)]
#[command(name = "flowpref", version, about = "Preference alignment for a toy rectified-flow generator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate the toy task and pretrain the reference flow model.
    Pretrain,
    /// Annotate generations and train the scoring head.
    TrainScorer,
    /// Build the preference pair dataset.
    GenPairs,
    /// Curriculum Flow-DPO against the frozen reference.
    DpoTrain,
    /// Evaluate the aligned policy against the reference.
    Eval,
    /// Run every stage in order.
    Pipeline,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for per-prompt parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// DPO KL strength.
    #[arg(long, global = true)]
    pub beta: Option<f64>,
    /// Curriculum threshold on the complexity score.
    #[arg(long, global = true)]
    pub score_delta: Option<f64>,
    /// Candidates sampled per prompt.
    #[arg(long, global = true)]
    pub num_candidates: Option<usize>,
    /// Classifier-free guidance scale for all sampling.
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    /// Minimum complexity score kept for automatic pairs.
    #[arg(long, global = true)]
    pub min_gap: Option<f64>,
    /// Human pair file (JSONL) merged into the dataset.
    #[arg(long, global = true)]
    pub human_pairs: Option<PathBuf>,
}

impl CommonArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out_dir: self.out.clone(),
            beta: self.beta,
            score_delta: self.score_delta,
            num_candidates: self.num_candidates,
            gamma: self.gamma,
            min_gap: self.min_gap,
            human_pairs: self.human_pairs.clone(),
        }
    }

    /// Load, override and validate the run configuration.
    pub fn context(&self) -> Result<Context> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let overrides = self.overrides().apply(&mut cfg);
        cfg.validate()?;
        Ok(Context { cfg, overrides })
    }
}

/// Execute one subcommand and return its printable summary.
pub fn run(cli: &Cli) -> Result<String> {
    let ctx = cli.common.context()?;
    let work = || -> Result<String> {
        match cli.command {
            Command::Pretrain => Ok(stages::render_pretrain(&stages::run_pretrain(&ctx)?)),
            Command::TrainScorer => Ok(stages::render_head(&stages::run_train_scorer(&ctx)?)),
            Command::GenPairs => Ok(stages::render_pairs(&stages::run_gen_pairs(&ctx)?)),
            Command::DpoTrain => Ok(stages::run_dpo(&ctx)?.render()),
            Command::Eval => Ok(stages::run_eval(&ctx)?.summary_table()),
            Command::Pipeline => stages::run_pipeline(&ctx),
        }
    };
    match cli.common.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Threads(e.to_string()))?
            .install(work),
        None => work(),
    }
}
