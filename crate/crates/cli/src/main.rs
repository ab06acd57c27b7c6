mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "qtd", version, about = "Simulate, analyze and model correlated-photon target detection")]
pub struct Cli {
    /// JSON run configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides `source.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap on worker threads. Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    /// Temporal gating only.
    T,
    /// Temporal gating plus the spectral selection band.
    Ts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CellsArg {
    /// `N' = l w`.
    Linear,
    /// Count the band's cells on the sensor.
    Exact,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a run: event file plus ground-truth sidecar.
    Simulate {
        /// Run length in seconds; overrides `source.duration_s`.
        #[arg(long)]
        duration: Option<f64>,
        /// Skip the ground-truth sidecar.
        #[arg(long)]
        no_truth: bool,
    },
    /// Build a time-walk table from an event file.
    Calibrate {
        #[arg(long)]
        events: PathBuf,
        /// Use only the first T seconds.
        #[arg(long = "T")]
        t: Option<f64>,
    },
    /// Coincidence analysis of an event file.
    Analyze {
        #[arg(long)]
        events: PathBuf,
        /// Time-walk table from `calibrate`; no correction when absent.
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "t")]
        mode: ModeArg,
        /// Selection-band width in pixels (mode ts only).
        #[arg(long)]
        w: Option<f64>,
        /// Analyze the first T seconds.
        #[arg(long = "T")]
        t: Option<f64>,
    },
    /// Enhancement factors against band width, from theory and optionally data.
    SweepW {
        #[arg(long, default_value_t = 1)]
        w_min: u32,
        #[arg(long, default_value_t = 40)]
        w_max: u32,
        #[arg(long, value_enum, default_value = "linear")]
        cells: CellsArg,
        /// Also measure each width on this event file.
        #[arg(long)]
        events: Option<PathBuf>,
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// SNR against acquisition time for both modes.
    SnrVsT {
        #[arg(long, value_delimiter = ',', default_value = "12.5,25,50,100,200")]
        times: Vec<f64>,
        #[arg(long)]
        w: Option<f64>,
        #[arg(long, value_enum, default_value = "linear")]
        cells: CellsArg,
        /// Also measure each time on this event file.
        #[arg(long)]
        events: Option<PathBuf>,
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// ROC curves: Poisson model from the theory constants, and empirical
    /// curves when an event file is given.
    Roc {
        #[arg(long)]
        events: Option<PathBuf>,
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long, default_value_t = 14.0)]
        w: f64,
        #[arg(long, value_enum, default_value = "linear")]
        cells: CellsArg,
    },
    /// All closed-form quantities as JSON.
    Theory {
        #[arg(long)]
        w: Option<f64>,
        #[arg(long, value_enum, default_value = "linear")]
        cells: CellsArg,
    },
}

/// Command failure, mapped to the process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments or configuration: exit 2.
    Usage(String),
    /// Anything that goes wrong while running: exit 1.
    Runtime(anyhow::Error),
}

impl From<qtd_core::Error> for Failure {
    fn from(e: qtd_core::Error) -> Self {
        match e {
            qtd_core::Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.into()))?;
    }
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        let mut src = cfg.source();
        src.seed = seed;
        cfg.source = Some(src);
    }
    commands::dispatch(&cli, &cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
