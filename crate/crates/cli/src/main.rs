//! `deltafuse`: synthesise data, train, evaluate, verify gradients and count
//! parameters.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use deltafuse_core::{AlignMode, OpKind, StageTag};

#[derive(Parser)]
#[command(name = "deltafuse", version, about = "Delta-attention multimodal fusion runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    Synth(SynthArgs),
    /// Train the pipeline stage by stage and score the test split.
    Train(TrainArgs),
    /// Score saved checkpoints on a dataset.
    Eval(EvalArgs),
    /// Compare every gradient rule against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Report parameter counts against the cross-modal reference.
    Paramcount(ParamcountArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Align {
    Aligned,
    Unaligned,
}

impl From<Align> for AlignMode {
    fn from(a: Align) -> Self {
        match a {
            Align::Aligned => AlignMode::Aligned,
            Align::Unaligned => AlignMode::Unaligned,
        }
    }
}

fn parse_stage(s: &str) -> Result<StageTag, String> {
    StageTag::parse(s).ok_or_else(|| {
        let all: Vec<&str> = StageTag::ALL.iter().map(|t| t.name()).collect();
        format!("unknown stage {s:?}; expected one of {}", all.join(", "))
    })
}

fn parse_op(s: &str) -> Result<OpKind, String> {
    OpKind::parse(s).ok_or_else(|| format!("unknown op {s:?}"))
}

#[derive(Args)]
struct OutArg {
    /// Output directory [default: runs/<command>]
    #[arg(long, env = "DELTAFUSE_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Synthetic spec (TOML); defaults are used for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutArg,
    /// File name inside the output directory.
    #[arg(long, default_value = "dataset.jsonl")]
    name: String,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutArg,
    /// Concurrent stage-1 trainings.
    #[arg(long)]
    jobs: Option<usize>,
    /// Train only these stages (repeatable); others are loaded from existing
    /// checkpoints in the output directory when present.
    #[arg(long, value_parser = parse_stage)]
    stage: Vec<StageTag>,
    #[arg(long, value_enum)]
    align: Option<Align>,
    /// Fold the validation split into training.
    #[arg(long)]
    merge_valid: bool,
    /// Train every parameter jointly instead of stage by stage.
    #[arg(long)]
    end_to_end: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Run configuration; its test split is scored unless --data is given.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset file to score in full.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint directory [default: <out>/checkpoints]
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutArg,
    #[arg(long, value_enum)]
    align: Option<Align>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt one gradient rule to exercise the checker.
    #[arg(long, hide = true, value_parser = parse_op)]
    fault: Option<OpKind>,
}

#[derive(Args)]
pub struct ParamcountArgs {
    /// Run configuration whose model section is counted.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Paramcount(a) => commands::paramcount(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
