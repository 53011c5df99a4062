//! Command-line front end for fitting, decoding and simulating coupled state-switching models.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error, 3 numerical failure.
//! Every failure prints one line `chmm: error[<category>] exit=<code>: <message>` to stderr.

pub mod commands;
pub mod config;
pub mod density;
pub mod error;
pub mod ingest;
pub mod output;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use commands::DataSource;
pub use error::{Category, CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "chmm", version, about = "Coupled hidden Markov models and Markov-switching regression")]
pub struct Cli {
    /// Worker threads for restarts and replications (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct DataArg {
    /// Run config whose [data] section describes the input.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV file laid out like the data the model was fitted to.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

impl DataArg {
    fn source(&self) -> DataSource {
        match (&self.config, &self.data) {
            (Some(c), _) => DataSource::Config(c.clone()),
            (None, Some(d)) => DataSource::File(d.clone()),
            (None, None) => unreachable!("clap enforces the group"),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model by maximum likelihood.
    Fit {
        #[arg(long)]
        config: PathBuf,
        /// Override model.coupling.
        #[arg(long)]
        coupling: Option<String>,
        #[arg(long)]
        restarts: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip the observed-information standard errors.
        #[arg(long)]
        no_std_errors: bool,
    },
    /// Decode the hidden state sequence of a fitted model.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArg,
        /// True path (chain_<m>_state columns) to score the decoding against.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Seed for shifting exact zeros in beta columns.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "chmm-out")]
        out: PathBuf,
    },
    /// Simulate observations and the hidden path.
    Simulate {
        #[arg(long, conflicts_with = "design")]
        model: Option<PathBuf>,
        /// Built-in design: coupled or independent.
        #[arg(long)]
        design: Option<String>,
        /// Emission standard deviation of the built-in design.
        #[arg(long, default_value_t = 1.5)]
        sd: f64,
        #[arg(long)]
        length: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "chmm-out")]
        out: PathBuf,
    },
    /// One-step-ahead log score of the observations after a split point.
    Forecast {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArg,
        /// Number of leading time points used as history.
        #[arg(long)]
        split: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the simulation study described by a config's [simulation] section.
    Simstudy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        replications: Option<usize>,
        #[arg(long)]
        restarts: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit several coupling kinds and rank them by AIC.
    Select {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated coupling kinds (default: all kinds valid for the model).
        #[arg(long, value_delimiter = ',')]
        couplings: Option<Vec<String>>,
        #[arg(long)]
        restarts: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate the state-dependent densities of a model.
    Density {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = commands::DENSITY_POINTS)]
        points: usize,
        #[arg(long, requires = "to", allow_hyphen_values = true)]
        from: Option<f64>,
        #[arg(long, requires = "from", allow_hyphen_values = true)]
        to: Option<f64>,
        #[arg(long, default_value = "chmm-out")]
        out: PathBuf,
    },
}

/// Parses `args` and runs the command. Help and version requests succeed with output on `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                return write!(out, "{e}").map_err(|e| CliError::usage(e.to_string()));
            }
            let rendered = e.to_string();
            let message: Vec<&str> = rendered
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:"))
                .filter(|l| !l.is_empty())
                .collect();
            return Err(CliError::usage(message.join(" ").trim_start_matches("error: ").to_string()));
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be positive"));
        }
        // A second initialization in the same process keeps the first pool.
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::debug!("thread pool already initialized: {e}");
        }
    }
    match cli.command {
        Command::Fit { config, coupling, restarts, seed, out: dir, no_std_errors } => {
            let args = commands::FitArgs { config, coupling, restarts, seed, out: dir, no_std_errors };
            commands::run_fit(&args, out).map(drop)
        }
        Command::Decode { model, data, truth, seed, out: dir } => {
            let args = commands::DecodeArgs { model, data: data.source(), truth, seed, out: dir };
            commands::run_decode(&args, out).map(drop)
        }
        Command::Simulate { model, design, sd, length, seed, out: dir } => {
            let args = commands::SimulateArgs { model, design, sd, length, seed, out: dir };
            commands::run_simulate(&args, out)
        }
        Command::Forecast { model, data, split, seed } => {
            let args = commands::ForecastArgs { model, data: data.source(), split, seed };
            commands::run_forecast(&args, out).map(drop)
        }
        Command::Simstudy { config, replications, restarts, seed, out: dir } => {
            let args = commands::SimstudyArgs { config, replications, restarts, seed, out: dir };
            commands::run_simstudy(&args, out).map(drop)
        }
        Command::Select { config, couplings, restarts, seed, out: dir } => {
            let args = commands::SelectArgs { config, couplings, restarts, seed, out: dir };
            commands::run_select(&args, out).map(drop)
        }
        Command::Density { model, points, from, to, out: dir } => {
            let args = commands::DensityArgs { model, points, range: from.zip(to), out: dir };
            commands::run_density(&args, out)
        }
    }
}

/// Process entry point; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(args, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            let _ = lock.flush();
            eprintln!("{}", e.diagnostic());
            e.exit_code()
        }
    }
}
