mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Convex neuro-symbolic regression.
#[derive(Debug, Parser)]
#[command(name = "consol", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DatasetName {
    Syn1,
    Syn2,
    Pow,
    Mas,
}

#[derive(Debug, Args)]
struct Columns {
    /// 1-based input columns to keep, e.g. 1,2
    #[arg(long, value_parser = io::parse_columns)]
    inputs: Option<std::vec::Vec<usize>>,
    /// 1-based output columns to keep
    #[arg(long, value_parser = io::parse_columns)]
    outputs: Option<std::vec::Vec<usize>>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Run config supplying training settings
    #[arg(long)]
    config: Option<PathBuf>,
    /// Initial value of every weight
    #[arg(long, allow_hyphen_values = true)]
    init: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Samples per update; 0 for the full batch
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train and test CSV files with metadata
    GenData {
        dataset: Option<DatasetName>,
        /// Take dataset parameters and seeds from a run config
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Noise level of the training outputs in dB
        #[arg(long)]
        snr: Option<f64>,
        /// Training samples (and test samples where applicable)
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Search for an equation structure and fit it
    Search {
        #[arg(long)]
        config: PathBuf,
        /// Overrides all three seeds
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        snr: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a fixed structure
    Fit {
        /// model.json or a file with a "structure" entry
        #[arg(long)]
        structure: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        columns: Columns,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Numerical convexity checks
    Probe {
        #[command(subcommand)]
        kind: ProbeKind,
    },
    /// Score a fitted model on a dataset
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        columns: Columns,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum ProbeKind {
    /// Final loss for every initial value on a grid
    Sweep {
        #[arg(long)]
        structure: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, allow_hyphen_values = true, value_parser = io::parse_grid, default_value = "-10..10")]
        grid: std::vec::Vec<f64>,
        #[command(flatten)]
        columns: Columns,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Segment convexity test of a saved Q or reward network
    Segment {
        #[arg(long)]
        target: PathBuf,
        /// Number of random triples
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        /// Box bounds applied to every input coordinate
        #[arg(long, allow_hyphen_values = true, default_value_t = -1.0)]
        lo: f64,
        #[arg(long, allow_hyphen_values = true, default_value_t = 4.0)]
        hi: f64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Safe-region inequality at the model's weights
    Region {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Train to the optimum from the model's weights first
        #[arg(long)]
        at_optimum: bool,
        /// Number of random directions
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        columns: Columns,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Directional curvature of the loss, checked two ways
    SecondDeriv {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        columns: Columns,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("CONSOL_THREADS") else { return Ok(()) };
    let n: usize = v.parse().map_err(|_| consol_core::Error::Config(format!("CONSOL_THREADS='{v}' is not a count")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let consistency = err
        .chain()
        .any(|e| matches!(e.downcast_ref::<consol_core::Error>(), Some(consol_core::Error::Consistency(_))));
    if consistency {
        4
    } else {
        3
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match init_threads().and_then(|_| commands::run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
