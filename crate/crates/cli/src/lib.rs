//! `saq` command-line harness: dataset generation, quantizer training,
//! quantization, agent training, evaluation and diagnostics with
//! reproducible run directories.

mod commands;
pub mod rundir;
pub mod settings;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use saq_core::SaqError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_VERDICT: i32 = 3;

/// Bad flags, missing settings or invalid values.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// A diagnostic ran to completion but at least one verdict failed.
#[derive(Debug, thiserror::Error)]
#[error("diagnostic verdict failed: {0}")]
pub struct VerdictFailed(pub String);

/// Exit code for an error: usage problems are 1, failed verdicts 3, and
/// everything else (I/O, malformed files, model mismatches) 2.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<VerdictFailed>().is_some() {
        return EXIT_VERDICT;
    }
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(SaqError::InvalidConfig(_)) = cause.downcast_ref::<SaqError>() {
            return EXIT_USAGE;
        }
    }
    EXIT_DATA
}

#[derive(Parser, Debug)]
#[command(name = "saq", version, about = "State-conditioned action quantization for offline RL")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// key=value settings file; flags override its values
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Replace an existing output
    #[arg(long)]
    pub force: bool,
    /// Output file or run directory
    #[arg(long)]
    pub out: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate an offline dataset
    GenData(GenDataArgs),
    /// Train a state-conditioned action quantizer
    TrainQuantizer(TrainQuantizerArgs),
    /// Replace dataset actions with codebook indices
    Quantize(QuantizeArgs),
    /// Train an offline RL agent
    Train(TrainArgs),
    /// Roll out an agent in the maze
    Eval(EvalArgs),
    /// Run a diagnostic experiment and check its verdicts
    Diagnose(DiagnoseArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// maze, bandit or single-mode
    #[arg(long)]
    pub env: Option<String>,
    /// Trajectories (maze) or samples (bandits)
    #[arg(long)]
    pub n: Option<String>,
    /// Action noise standard deviation
    #[arg(long)]
    pub noise: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    /// Maze layout file ('#' wall, '.' free, 'S' start, 'G' goal)
    #[arg(long)]
    pub maze: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainQuantizerArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub dataset: Option<String>,
    /// Codebook size
    #[arg(long = "k", short = 'k')]
    pub k: Option<String>,
    /// Embedding dimension
    #[arg(long = "d", short = 'd')]
    pub d: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub learning_rate: Option<String>,
    /// Comma-separated hidden widths
    #[arg(long)]
    pub hidden: Option<String>,
    /// relu or tanh
    #[arg(long)]
    pub activation: Option<String>,
    #[arg(long)]
    pub commitment_weight: Option<String>,
    #[arg(long)]
    pub dead_code_period: Option<String>,
    /// true, or false to blind encoder and decoder to the state
    #[arg(long)]
    pub state_conditioned: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
}

#[derive(Args, Debug)]
pub struct QuantizeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub dataset: Option<String>,
    /// Quantizer model file
    #[arg(long)]
    pub model: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// cql, iql, brac, bc, cont-cql or cont-bc
    #[arg(long)]
    pub algo: Option<String>,
    #[arg(long)]
    pub dataset: Option<String>,
    /// Quantizer model (discrete algorithms)
    #[arg(long)]
    pub quantizer: Option<String>,
    #[arg(long)]
    pub alpha: Option<String>,
    #[arg(long)]
    pub tau: Option<String>,
    #[arg(long)]
    pub lambda: Option<String>,
    #[arg(long)]
    pub beta: Option<String>,
    #[arg(long)]
    pub alpha_ent: Option<String>,
    #[arg(long)]
    pub gamma: Option<String>,
    #[arg(long)]
    pub learning_rate: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub steps: Option<String>,
    #[arg(long)]
    pub target_update_period: Option<String>,
    /// Comma-separated hidden widths
    #[arg(long)]
    pub hidden: Option<String>,
    /// sampled or expected (CQL)
    #[arg(long)]
    pub backup: Option<String>,
    #[arg(long)]
    pub log_every: Option<String>,
    #[arg(long)]
    pub eval_every: Option<String>,
    /// Maze episodes per evaluation during training (0 disables)
    #[arg(long)]
    pub episodes: Option<String>,
    #[arg(long)]
    pub jitter: Option<String>,
    /// Proposal samples per state for the continuous penalty estimate
    #[arg(long)]
    pub n_samples: Option<String>,
    #[arg(long)]
    pub grid_resolution: Option<String>,
    #[arg(long)]
    pub penalty_states: Option<String>,
    #[arg(long)]
    pub maze: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub agent: Option<String>,
    /// Quantizer model (discrete agents)
    #[arg(long)]
    pub quantizer: Option<String>,
    /// Only maze is supported
    #[arg(long)]
    pub env: Option<String>,
    #[arg(long)]
    pub maze: Option<String>,
    #[arg(long)]
    pub episodes: Option<String>,
    #[arg(long)]
    pub jitter: Option<String>,
    /// greedy or sample (discrete agents)
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub common: Common,
    /// penalty-gap, iql-oracle, codebook, state-cond, constraint-sweep or identities
    pub experiment: String,
    /// Comma-separated seeds for maze experiments
    #[arg(long)]
    pub seeds: Option<String>,
    /// Seed for the oracle and identity checks
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub instances: Option<String>,
    #[arg(long)]
    pub k_max: Option<String>,
    /// Demonstrations in the maze dataset
    #[arg(long)]
    pub demos: Option<String>,
    #[arg(long)]
    pub noise: Option<String>,
    #[arg(long = "k", short = 'k')]
    pub k: Option<String>,
    #[arg(long)]
    pub k_sizes: Option<String>,
    #[arg(long)]
    pub conditioning_k: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub alpha: Option<String>,
    #[arg(long)]
    pub alphas: Option<String>,
    #[arg(long)]
    pub steps: Option<String>,
    #[arg(long)]
    pub log_every: Option<String>,
    #[arg(long)]
    pub eval_every: Option<String>,
    #[arg(long)]
    pub backup: Option<String>,
    #[arg(long)]
    pub continuous_alpha: Option<String>,
    #[arg(long)]
    pub continuous_steps: Option<String>,
    #[arg(long)]
    pub continuous_log_every: Option<String>,
    #[arg(long)]
    pub continuous_eval_every: Option<String>,
    #[arg(long)]
    pub n_samples: Option<String>,
    #[arg(long)]
    pub grid_resolution: Option<String>,
    #[arg(long)]
    pub episodes: Option<String>,
    #[arg(long)]
    pub jitter: Option<String>,
    #[arg(long)]
    pub bandit_samples: Option<String>,
    #[arg(long)]
    pub bandit_noise: Option<String>,
    #[arg(long)]
    pub bandit_k: Option<String>,
    #[arg(long)]
    pub maze: Option<String>,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
