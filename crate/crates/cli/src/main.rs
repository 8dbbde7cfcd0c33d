mod backend;
mod bench;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pixstorm::serial_clusterer::Variant;
use serde::Serialize;

/// Exit codes.
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_COMPARISON: u8 = 3;
pub const EXIT_RUNTIME: u8 = 4;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Comparison(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Comparison(_) => EXIT_COMPARISON,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Comparison(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<pixstorm::Error> for Failure {
    fn from(e: pixstorm::Error) -> Self {
        match e {
            pixstorm::Error::Config(_) => Failure::Usage(e.to_string()),
            pixstorm::Error::IncomparableClusterings(_) => Failure::Comparison(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;

#[derive(Parser)]
#[command(name = "pixstorm", version, about = "Streaming clustering of pixel detector hits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic hit file and its ground-truth label sidecar (.pxl).
    Generate(GenerateArgs),
    /// Cluster a hit file with one of the backends.
    Cluster(ClusterArgs),
    /// Compare two cluster files, or a cluster file against ground truth.
    Compare(CompareArgs),
    /// Measure throughput over repeated in-memory data.
    Bench(BenchArgs),
    /// Print statistics of a hit stream.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Serial,
    Pipeline,
    Chunked,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: pixstorm::Error| e.to_string())
}

#[derive(Args)]
pub struct GenerateArgs {
    /// Dataset preset (gamma, pion0, pion45, pion75, pb0, pb50, pb90, pb*-subset).
    #[arg(long)]
    pub preset: String,
    /// Number of hits. Whole clusters are kept, so the count may exceed this slightly.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub hits: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output hit file (.pxh binary or .csv); labels go next to it with extension .pxl.
    #[arg(long)]
    pub out: PathBuf,
    /// Minimum temporal separation scale between neighboring clusters.
    #[arg(long, default_value_t = 200)]
    pub dtmax: u64,
    /// Maximum backward displacement of the written stream (ns).
    #[arg(long, default_value_t = 1_000)]
    pub unsortedness: u64,
    /// Hit rate in MHit/s; defaults to the preset's.
    #[arg(long)]
    pub rate: Option<f64>,
}

#[derive(Args, Clone, Debug)]
pub struct ClusterOpts {
    #[arg(long, value_enum, default_value = "serial")]
    pub backend: Backend,
    #[arg(long, default_value = "local", value_parser = parse_variant)]
    pub variant: Variant,
    /// Maximum time difference between linked hits (ns).
    #[arg(long, default_value_t = 200)]
    pub dtmax: u64,
    /// Pipeline split window size (ns).
    #[arg(long, default_value_t = 10_000)]
    pub window: u64,
    /// Unsortedness bound of the input (ns).
    #[arg(long, default_value_t = 1_000)]
    pub unsortedness: u64,
    /// Chunked backend: buffer capacity in hits.
    #[arg(long, default_value_t = 1 << 20)]
    pub buffer_hits: usize,
    /// Chunked backend: fill level after which a buffer may be dispatched.
    #[arg(long, default_value_t = 1 << 16)]
    pub buffer_threshold: usize,
    /// Chunked backend: gap that closes a buffer (ns).
    #[arg(long, default_value_t = 500)]
    pub t_closing: u64,
    /// Pipeline: skip the temporal and bounding-box stages of the merge check.
    #[arg(long)]
    pub no_fast_reject: bool,
    /// Pipeline: emit clusters as merge workers release them instead of in global order.
    #[arg(long)]
    pub unordered: bool,
    /// Input holds raw detector records (PXR1 or raw CSV) to calibrate.
    #[arg(long)]
    pub raw: bool,
    /// Detector description (TOML) for raw input.
    #[arg(long)]
    pub detector: Option<PathBuf>,
}

#[derive(Args)]
pub struct ClusterArgs {
    #[command(flatten)]
    pub opts: ClusterOpts,
    /// Pipeline lanes.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub lanes: u64,
    /// Chunked workers.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub workers: u64,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Cluster file (.pxc binary or .csv).
    #[arg(long)]
    pub out: PathBuf,
    /// Statistics JSON; printed to stdout when omitted.
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Args)]
pub struct CompareArgs {
    /// Cluster file.
    pub a: PathBuf,
    /// Second cluster file.
    pub b: Option<PathBuf>,
    /// Hit file whose .pxl sidecar holds the reference labels.
    #[arg(long, conflicts_with = "b")]
    pub truth: Option<PathBuf>,
    /// Exit with code 3 when the IoU is below this value.
    #[arg(long)]
    pub min_iou: Option<f64>,
    /// Report JSON; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub opts: ClusterOpts,
    /// Lane counts to sweep (pipeline).
    #[arg(long, value_delimiter = ',', default_value = "1", value_parser = clap::value_parser!(u64).range(1..))]
    pub lanes: Vec<u64>,
    /// Worker counts to sweep (chunked).
    #[arg(long, value_delimiter = ',', default_value = "1", value_parser = clap::value_parser!(u64).range(1..))]
    pub workers: Vec<u64>,
    /// Hit file to load; alternatively generate with --preset.
    #[arg(long = "in", conflicts_with = "preset", required_unless_present = "preset")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    /// Hits to generate with --preset.
    #[arg(long, default_value_t = 100_000, value_parser = clap::value_parser!(u64).range(1..))]
    pub hits: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Copies of the data per run; defaults to 25, or 250 for the chunked backend.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub nrep: Option<u64>,
    /// Measurements per point.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub runs: u64,
    /// Time offset between copies (ns); defaults to max toa + 2 * dtmax.
    #[arg(long)]
    pub period: Option<u64>,
    /// Report JSON; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Flat per-point table.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args)]
pub struct InspectArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub raw: bool,
    #[arg(long)]
    pub detector: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Cluster(a) => commands::cluster(&a),
        Command::Compare(a) => commands::compare(&a),
        Command::Bench(a) => bench::bench(&a),
        Command::Inspect(a) => commands::inspect(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
