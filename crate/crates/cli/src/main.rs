mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Rewrite residual skips, retrain under distillation, and price the result
/// on streaming and PE-array accelerators.
#[derive(Debug, Parser)]
#[command(name = "skipwise", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a network graph and write it as JSON.
    Build(BuildArgs),
    /// Remove or shorten skips step by step.
    Transform(TransformArgs),
    /// Distill a teacher into a student whose skips are altered gradually.
    Train(TrainArgs),
    /// Lower a graph to the streaming design and estimate its cost.
    Estimate(EstimateArgs),
    /// Schedule a graph on the PE array, with and without its skips.
    Pearray(PeArrayArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
enum Family {
    ResnetBasic,
    ResnetBottleneck,
    Quartznet,
    BasicBlock,
    ResidualMlp,
}

#[derive(Debug, Args, serde::Serialize)]
struct BuildArgs {
    family: Family,
    /// ResNet depth (6k + 2).
    #[arg(long, default_value_t = 20)]
    depth: usize,
    /// Base filter count (resnet-basic) or block width (basic-block).
    #[arg(long, default_value_t = 16)]
    filters: usize,
    /// QuartzNet blocks or residual-MLP blocks.
    #[arg(long)]
    blocks: Option<usize>,
    /// Layer groups per QuartzNet block.
    #[arg(long, default_value_t = 5)]
    span: usize,
    /// Input shape as HxWxC. Defaults depend on the family.
    #[arg(long)]
    input: Option<String>,
    #[arg(long, default_value_t = 2)]
    features: usize,
    #[arg(long, default_value_t = 16)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    layers_per_block: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
enum ModeArg {
    Remove,
    Shorten,
}

#[derive(Debug, Args, serde::Serialize)]
struct TransformArgs {
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Number of single steps, or `all` to reach the fixed point.
    #[arg(long, default_value = "all")]
    steps: String,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Debug, Args, serde::Serialize)]
struct TrainArgs {
    /// Teacher graph JSON. The student starts as a copy of the teacher.
    #[arg(long)]
    teacher: PathBuf,
    /// Trained teacher parameters. Without it the teacher is pretrained here.
    #[arg(long)]
    teacher_params: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pretrain_epochs: usize,
    #[arg(long, default_value_t = 3)]
    alpha: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, value_enum, default_value = "remove")]
    mode: ModeArg,
    #[arg(long, default_value_t = 0.35)]
    beta: f64,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run a seed range such as `0..5` (end exclusive) or `0..=4`.
    #[arg(long)]
    seeds: Option<String>,
    /// Fake-quantize student weights, e.g. `8,3`.
    #[arg(long)]
    quantize: Option<String>,
    /// Synthetic task name (spiral, moons, blobs) or a CSV path.
    #[arg(long, default_value = "spiral")]
    data: String,
    #[arg(long, default_value_t = 500)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Report JSON path. A CSV with the same stem is written alongside.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
enum VariantArg {
    Traditional,
    Removed,
    Shortened,
    All,
}

#[derive(Debug, Args, serde::Serialize)]
struct EstimateArgs {
    #[arg(long, short)]
    input: PathBuf,
    /// The graph is transformed as needed to match the variant.
    #[arg(long, value_enum, default_value = "all")]
    variant: VariantArg,
    #[arg(long, default_value = "16,6")]
    precision: String,
    #[arg(long, default_value_t = 576)]
    reuse: u64,
    #[arg(long, short)]
    out: PathBuf,
    /// Optional per-variant CSV summary.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args, serde::Serialize)]
struct PeArrayArgs {
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    #[arg(long)]
    clock_hz: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    bits: Option<u32>,
    #[arg(long)]
    utilization: Option<f64>,
    #[arg(long)]
    overhead_cycles: Option<u64>,
    /// Off-chip bits per cycle; 0 disables the transfer bound.
    #[arg(long)]
    dram_bits_per_cycle: Option<f64>,
    /// Accuracy to pass through into the report.
    #[arg(long)]
    accuracy: Option<f64>,
    #[arg(long, short)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Build(a) => commands::build(a),
        Command::Transform(a) => commands::transform(a),
        Command::Train(a) => commands::train(a),
        Command::Estimate(a) => commands::estimate(a),
        Command::Pearray(a) => commands::pearray(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
