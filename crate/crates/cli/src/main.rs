//! `geovmf` command-line entry point.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use geovmf::{ErrorClass, LossKind, PointRule};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, Parser, Serialize)]
#[command(name = "geovmf", version, about = "Text geolocation with von Mises-Fisher mixtures")]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,

    /// `key = value` file; flags given on the command line take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Fetch geotagged articles, or validate an existing corpus file.
    Ingest(IngestArgs),
    /// Shuffle a corpus and partition it into train/val/test files.
    Split(SplitArgs),
    /// Train a mixture head and write a checkpoint.
    Train(TrainArgs),
    /// Write the predicted mixture for every record.
    Predict(PredictArgs),
    /// Score predictions against gold locations.
    Evaluate(EvaluateArgs),
    /// Write HPD contours of one predicted density as GeoJSON.
    Contours(ContoursArgs),
    /// Draw points from a single vMF component.
    Sample(SampleArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Write the synthetic four-city corpus.
    Toy(ToyArgs),
    /// Re-run the command recorded in a manifest and compare outputs.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::Split(_) => "split",
            Command::Train(_) => "train",
            Command::Predict(_) => "predict",
            Command::Evaluate(_) => "evaluate",
            Command::Contours(_) => "contours",
            Command::Sample(_) => "sample",
            Command::Gradcheck(_) => "gradcheck",
            Command::Toy(_) => "toy",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct IngestArgs {
    /// MediaWiki API endpoint to crawl.
    #[arg(long, conflicts_with = "input")]
    pub endpoint: Option<String>,
    /// Existing corpus to validate instead of fetching.
    #[arg(long = "in", required_unless_present = "endpoint")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub limit: usize,
    /// Requests per second.
    #[arg(long, default_value_t = 1.0)]
    pub rate: f64,
    #[arg(long, default_value_t = 20)]
    pub batch: usize,
    /// Continuation token file, read on start and rewritten as batches land.
    #[arg(long)]
    pub cursor: Option<PathBuf>,
    /// Skip malformed rows instead of failing.
    #[arg(long)]
    pub lenient: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', default_value = "0.98,0.01,0.01")]
    pub fractions: Vec<f64>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FeatureArgs {
    /// Hashed feature dimension (power of two).
    #[arg(long, default_value_t = 4096)]
    pub dim: usize,
    #[arg(long, default_value_t = 3)]
    pub ngram_min: usize,
    #[arg(long, default_value_t = 5)]
    pub ngram_max: usize,
    #[arg(long, default_value_t = 0)]
    pub hash_seed: u64,
    /// Keep letter case when hashing.
    #[arg(long)]
    pub keep_case: bool,
    /// Tab-separated precomputed vectors (header `id<TAB>dim=D`) in place of hashed n-grams.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch TSV log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub features: FeatureArgs,
    #[arg(long, default_value_t = 256)]
    pub hidden: usize,
    #[arg(long, default_value_t = geovmf::mixture::DEFAULT_COMPONENTS)]
    pub components: usize,
    #[arg(long, default_value_t = 5e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// `mixture_nll` or `weighted_nll`.
    #[arg(long, default_value = "mixture_nll")]
    pub loss: LossKind,
    /// Visit examples in file order every epoch.
    #[arg(long)]
    pub no_shuffle: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Corpus JSONL to predict for.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also attach a point prediction chosen by this rule.
    #[arg(long)]
    pub rule: Option<PointRule>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    /// A rule name, or `all`.
    #[arg(long, default_value = "all")]
    pub rule: String,
    /// `imputed` or `complete_cases`.
    #[arg(long, default_value = "imputed")]
    pub mode: geovmf::eval::EvalMode,
    /// Row label in the table; defaults to the prediction file stem.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, default_value_t = geovmf::eval::DEFAULT_BOOTSTRAP)]
    pub bootstrap: usize,
    /// JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ContoursArgs {
    #[arg(long, requires = "text", conflicts_with = "pred")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub text: Option<String>,
    #[arg(long, requires = "id", required_unless_present = "model")]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub id: Option<String>,
    /// Gold location as `lat,lon`.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub gold: Option<Vec<f64>>,
    /// Mass levels; the nine deciles by default.
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1.0)]
    pub coarse_res: f64,
    #[arg(long, default_value_t = 0.05)]
    pub fine_res: f64,
    #[arg(long, default_value_t = 2_000_000)]
    pub max_cells: usize,
    /// GeoJSON path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SampleArgs {
    #[arg(long, allow_negative_numbers = true)]
    pub lat: f64,
    #[arg(long, allow_negative_numbers = true)]
    pub lon: f64,
    #[arg(long)]
    pub kappa: f64,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// CSV path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    /// Input, hidden and component counts.
    #[arg(long, value_delimiter = ',', default_value = "8,4,2")]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 25)]
    pub cases: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ToyArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = geovmf::toy::RECORDS_PER_CITY)]
    pub per_city: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(geovmf::Error),
    Numeric(String),
}

impl From<geovmf::Error> for CliError {
    fn from(e: geovmf::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Core(e) => match e.class() {
                ErrorClass::Data => EXIT_DATA,
                ErrorClass::Numeric => EXIT_NUMERIC,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

/// Parses `argv` (merging any config file) and runs the command.
pub fn run(argv: Vec<String>) -> u8 {
    let argv = match config::merge(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match commands::dispatch(&cli, &argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args().collect()))
}
