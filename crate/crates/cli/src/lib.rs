//! The `cinecav` command line.
//!
//! [`run`] parses arguments, expands an optional `--config` file and
//! dispatches to one subcommand. Exit status is 0 on success, 1 on data or
//! QC failures and 2 on usage errors.

mod commands;
pub mod config;

use clap::{Args, CommandFactory, Parser, Subcommand};
use std::ffi::OsString;
use std::path::PathBuf;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DATA: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "cinecav", version, about = "Interpretable classification of cardiac segmentation sequences")]
pub struct Cli {
    /// Read default flag values from a `key = value` file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Generate a phantom cohort.
    Gen(GenArgs),
    /// Measure biomarkers of every subject.
    Biomarkers(BiomarkerArgs),
    /// Keep only subjects that pass quality control.
    Qc(QcArgs),
    /// Train the VAE and classifier.
    Train(TrainArgs),
    /// Held-out AUC and reconstruction Dice.
    Eval(EvalArgs),
    /// Fit concept activation vectors from a pool cohort.
    CavTrain(CavTrainArgs),
    /// Score classifier sensitivity to one concept vector.
    CavScore(CavScoreArgs),
    /// Decode a subject walked along a latent direction.
    Interp(InterpArgs),
    /// Project latent means onto two principal axes.
    Pca(PcaArgs),
    /// Sensitivity table, metrics, PCA figure and manifest.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SmoothingArgs {
    /// Savitzky-Golay window (odd); defaults scale with T.
    #[arg(long)]
    pub window: Option<usize>,
    /// Savitzky-Golay polynomial order.
    #[arg(long)]
    pub order: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0.25)]
    pub prevalence: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the last N subjects to --test-out.
    #[arg(long, requires = "test_out")]
    pub test_count: Option<usize>,
    #[arg(long, requires = "test_count")]
    pub test_out: Option<PathBuf>,
    /// Ground-truth biomarker CSV.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub first_id: u32,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 1)]
    pub slices: usize,
    #[arg(long, default_value_t = 20)]
    pub frames: usize,
    /// 80x80x3 frames, T=50.
    #[arg(long)]
    pub paper_dims: bool,
    /// EF reduction of diseased subjects.
    #[arg(long)]
    pub ef_shift: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BiomarkerArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub smoothing: SmoothingArgs,
}

#[derive(Debug, Args)]
pub struct QcArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub smoothing: SmoothingArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Model output (CMDL).
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch loss CSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 40)]
    pub epochs1: usize,
    #[arg(long, default_value_t = 40)]
    pub epochs2: usize,
    #[arg(long, default_value_t = 3e-4)]
    pub lr1: f64,
    #[arg(long, default_value_t = 3e-4)]
    pub lr2: f64,
    #[arg(long, default_value_t = 0.2)]
    pub beta: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2)]
    pub max_shift: usize,
    #[arg(long, default_value_t = 16)]
    pub latent: usize,
    /// Gradient-norm clipping threshold; 0 disables it.
    #[arg(long, default_value_t = 1000.0)]
    pub clip_norm: f64,
    /// Print per-epoch losses to stderr.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Metrics CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CavTrainArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Cohort the concept sets are drawn from.
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Concepts to fit; defaults to the five clinical concepts.
    #[arg(long, value_delimiter = ',')]
    pub concept: Vec<String>,
    #[arg(long, default_value_t = cinecav::cav::DEFAULT_K)]
    pub k: usize,
    /// cav, latent or latent_mean.
    #[arg(long, default_value = "cav")]
    pub layer: String,
    #[arg(long, default_value_t = 1e-3)]
    pub lambda: f64,
    #[command(flatten)]
    pub smoothing: SmoothingArgs,
}

#[derive(Debug, Args)]
pub struct CavScoreArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub cav: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub smoothing: SmoothingArgs,
}

#[derive(Debug, Args)]
pub struct InterpArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub subject: u32,
    /// `disease` (classifier gradient) or a concept name.
    #[arg(long, default_value = "disease")]
    pub direction: String,
    /// Reference cohort for the direction; defaults to --in.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-2,-1,0,1,2")]
    pub alphas: Vec<f64>,
    #[arg(long, default_value_t = cinecav::cav::DEFAULT_K)]
    pub k: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub smoothing: SmoothingArgs,
}

#[derive(Debug, Args)]
pub struct PcaArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Held-out test set.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Concept vector files, one table row each.
    #[arg(long, value_delimiter = ',', required = true)]
    pub cav: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub smoothing: SmoothingArgs,
}

/// Failure of a subcommand, carrying its exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Data(_) => EXIT_DATA,
        }
    }
}

impl From<cinecav::Error> for Failure {
    fn from(e: cinecav::Error) -> Self {
        match e {
            cinecav::Error::Parameter(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

/// Splices config-file flags in front of the subcommand's own flags.
fn expand_config(argv: Vec<String>) -> Result<Vec<String>, String> {
    let mut path = None;
    let mut rest = Vec::with_capacity(argv.len());
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            path = Some(it.next().ok_or("--config needs a file")?);
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = path else { return Ok(rest) };
    let entries = config::read(path.as_ref())?;
    let cmd = Cli::command();
    let pos = rest
        .iter()
        .enumerate()
        .skip(1)
        .find(|(_, a)| cmd.find_subcommand(a.as_str()).is_some())
        .map(|(i, _)| i)
        .ok_or("--config given without a subcommand")?;
    let sub = cmd.find_subcommand(rest[pos].as_str()).unwrap();
    let flags = config::to_flags(sub, &entries, &rest[pos + 1..])?;
    rest.splice(pos + 1..pos + 1, flags);
    Ok(rest)
}

/// Runs one invocation; `argv[0]` is the program name.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString>,
{
    let argv: Vec<String> = argv.into_iter().map(|a| a.into().to_string_lossy().into_owned()).collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            match &f {
                Failure::Usage(m) | Failure::Data(m) => eprintln!("error: {m}"),
            }
            f.code()
        }
    }
}
