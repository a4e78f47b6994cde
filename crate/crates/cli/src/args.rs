use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "dvote",
    version,
    about = "Committee-verified postal ballot counting simulator"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Overrides the seed in any config file.
    #[arg(long, global = true, env = "DVOTE_SEED")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Leave wall-clock timestamps out of every output.
    #[arg(long, global = true, default_value_t = true, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub fixed_clock: bool,
    /// Run scrutineers of a round in parallel; outputs are unchanged.
    #[arg(long, global = true)]
    pub parallel: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DemoProgram {
    /// `a + b` with `a = b = 1`.
    Add,
    /// One signature-distance evaluation.
    SigModel,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a full election scenario and write the report, ledger and records.
    RunElection { scenario: PathBuf },
    /// Replay a two-party dispute against a claimant corrupting step `k`.
    DisputeDemo {
        #[arg(long, value_enum, default_value = "add")]
        program: DemoProgram,
        /// Corrupted state index; defaults to the last step for `add` and
        /// the middle step for `sig-model`.
        #[arg(long)]
        k: Option<u64>,
    },
    /// Train a model through the committee, then verify the record.
    AuditTraining { config: PathBuf },
    /// Gas needed to verify `flops` on-chain.
    EstimateGas {
        /// Accepts integers and exact scientific notation such as `30e9`.
        flops: String,
        #[arg(long)]
        gas_per_flop: Option<u64>,
        #[arg(long)]
        block_gas_limit: Option<u64>,
    },
    /// Independently re-verify a provenance record.
    VerifyRecord {
        record: PathBuf,
        /// The training config the record claims to follow.
        #[arg(long)]
        config: PathBuf,
    },
}
