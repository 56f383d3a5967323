use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use octctx::Error;

mod commands;

#[derive(Parser)]
#[command(
    name = "octctx",
    version,
    about = "Learned-context octree point cloud geometry codec"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic point cloud.
    Synth(SynthArgs),
    /// Train a context model on point clouds.
    Train(TrainArgs),
    /// Compress a point cloud.
    Encode(EncodeArgs),
    /// Decompress a bitstream to PLY.
    Decode(DecodeArgs),
    /// Rate and distortion of a bitstream against its source cloud.
    Eval(EvalArgs),
    /// Inter-class feature statistics of one or more models.
    Analyze(AnalyzeArgs),
    /// Write the context windows of a cloud as text records.
    Dump(DumpArgs),
    /// Train and evaluate the base, ER, EM and EMR variants side by side.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

impl OnOff {
    fn is_on(self) -> bool {
        self == OnOff::On
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Ascii,
    Binary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Preset {
    Toy,
    Desk,
    Full,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_parser = parse_kind)]
    kind: octctx::geometry::SynthKind,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    #[arg(long, value_enum, default_value_t = Format::Binary)]
    format: Format,
    #[arg(long)]
    out: PathBuf,
}

fn parse_kind(s: &str) -> Result<octctx::geometry::SynthKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Context window length.
    #[arg(long)]
    window: Option<usize>,
    /// Ancestors per context node.
    #[arg(long)]
    ancestors: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    hidden_main: Option<usize>,
    #[arg(long)]
    hidden_branch: Option<usize>,
    #[arg(long, value_enum, default_value_t = OnOff::On)]
    residual: OnOff,
    #[arg(long, value_enum, default_value_t = OnOff::On)]
    branch: OnOff,
    /// Only attend to predecessors on the target's octree level.
    #[arg(long)]
    strict_level: bool,
    /// Start with zeroed output layers (uniform predictions).
    #[arg(long)]
    zero_init: bool,
}

#[derive(Args, Clone)]
struct ScheduleArgs {
    #[arg(long, default_value_t = 1)]
    branch_epochs: usize,
    #[arg(long, default_value_t = 3)]
    main_epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.95)]
    lr_decay: f64,
    /// Keep batches in stream order instead of shuffling them each epoch.
    #[arg(long)]
    no_shuffle: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Training clouds (PLY).
    #[arg(long, required = true, num_args = 1..)]
    corpus: Vec<PathBuf>,
    #[arg(long, default_value_t = 8)]
    depth: u8,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-batch loss trace (CSV); defaults to `<out>.trace.csv`.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    depth: u8,
    /// Levels to code; defaults to the full depth.
    #[arg(long)]
    levels: Option<u8>,
    #[arg(long)]
    out: PathBuf,
    /// Report file; defaults to `<out>.report`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Binary)]
    format: Format,
}

#[derive(Args)]
struct EvalArgs {
    /// Source cloud (PLY).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    bitstream: PathBuf,
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long, required = true, num_args = 1..)]
    model: Vec<PathBuf>,
    /// Clouds whose node streams supply the features.
    #[arg(long, num_args = 1.., required_unless_present = "dump")]
    corpus: Vec<PathBuf>,
    /// Window records written by `dump` instead of clouds.
    #[arg(long, conflicts_with = "corpus")]
    dump: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    depth: u8,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    depth: u8,
    #[arg(long, default_value_t = 64)]
    window: usize,
    #[arg(long, default_value_t = 2)]
    ancestors: usize,
    #[arg(long)]
    strict_level: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, required = true, num_args = 1..)]
    corpus: Vec<PathBuf>,
    /// Clouds to encode; defaults to the training corpus.
    #[arg(long, num_args = 1..)]
    test: Vec<PathBuf>,
    #[arg(long, default_value_t = 8)]
    depth: u8,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::ModelMismatch => 4,
        Error::CorruptStream(_) => 5,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            e.exit()
        }
        Err(e) => {
            let text = e.render().to_string();
            eprint!("{text}");
            if !text.contains("Usage:") {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Encode(a) => commands::encode(a),
        Command::Decode(a) => commands::decode(a),
        Command::Eval(a) => commands::eval(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Dump(a) => commands::dump(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
