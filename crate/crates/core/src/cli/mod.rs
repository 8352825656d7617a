//! Command-line front end: `fit`, `analyze`, `balance`, `weights` and
//! `simulate`, each driven by a TOML config file.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::asymptotics::AsymptoticsError;
use crate::balance::BalanceError;
use crate::dataset::DataError;
use crate::estimate::EstimateError;
use crate::propensity::FitError;
use crate::weights::WeightError;

pub use config::{AnalysisConfig, Overrides};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "PSWEIGHT_OUT";
pub const DEFAULT_OUT: &str = "psweight-out";

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(e) => CliError::Io(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::Data(d) => d.into(),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<WeightError> for CliError {
    fn from(e: WeightError) -> Self {
        match e {
            WeightError::InvalidAlpha(_)
            | WeightError::UnknownCovariate(_)
            | WeightError::NoSamplingWeights
            | WeightError::Parse(_) => CliError::Config(e.to_string()),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<BalanceError> for CliError {
    fn from(e: BalanceError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<EstimateError> for CliError {
    fn from(e: EstimateError) -> Self {
        match e {
            EstimateError::MissingOutcome => CliError::Config(e.to_string()),
            EstimateError::Fit(f) => f.into(),
            EstimateError::Weights(w) => w.into(),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<AsymptoticsError> for CliError {
    fn from(e: AsymptoticsError) -> Self {
        match e {
            AsymptoticsError::Io(e) => CliError::Io(e.to_string()),
            AsymptoticsError::InvalidDensity(_)
            | AsymptoticsError::InvalidScenario(_)
            | AsymptoticsError::Parse(_)
            | AsymptoticsError::NotScoreBased(_)
            | AsymptoticsError::NoCandidates => CliError::Config(e.to_string()),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "psweight", version, about = "Propensity-score balancing weights")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the propensity model; write model.json and calibration.csv.
    Fit(CommonArgs),
    /// Fit, weight, check balance and estimate for every scheme.
    Analyze(CommonArgs),
    /// Balance diagnostics only (no outcome needed).
    Balance(CommonArgs),
    /// Export per-unit weights for every scheme.
    Weights(CommonArgs),
    /// Asymptotic relative variances for univariate scenarios.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Weight scheme; repeat to give several.
    #[arg(long = "scheme")]
    pub schemes: Vec<String>,
    /// Truncation threshold for a bare `truncated` scheme.
    #[arg(long)]
    pub alpha: Option<f64>,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            replicates: self.replicates,
            schemes: self.schemes.clone(),
            alpha: self.alpha,
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario file.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for the Monte Carlo columns.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of Monte Carlo simulations per cell.
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long = "scheme")]
    pub schemes: Vec<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

/// Output directory: flag, then config, then environment, then default.
fn output_dir(flag: Option<&Path>, config: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| config.map(Path::to_path_buf))
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// Files are written to a staging directory and moved into place only when
/// the whole command succeeds.
pub(crate) struct Staging {
    dir: tempfile::TempDir,
    out: PathBuf,
    created_out: bool,
    files: Vec<String>,
}

impl Staging {
    fn new(out: &Path) -> Result<Self, CliError> {
        let created_out = !out.exists();
        std::fs::create_dir_all(out)?;
        let dir = tempfile::Builder::new().prefix(".psweight-staging").tempdir_in(out)?;
        Ok(Staging {
            dir,
            out: out.to_path_buf(),
            created_out,
            files: Vec::new(),
        })
    }

    fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        std::fs::write(self.dir.path().join(name), bytes)?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub(crate) fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write_bytes(name, &bytes)
    }

    pub(crate) fn write_csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
        self.write_bytes(name, &bytes)
    }

    fn commit(self) -> Result<Vec<PathBuf>, CliError> {
        let mut written = Vec::new();
        for f in &self.files {
            let target = self.out.join(f);
            std::fs::rename(self.dir.path().join(f), &target)?;
            written.push(target);
        }
        Ok(written)
    }

    fn abandon(self) {
        let (out, created) = (self.out.clone(), self.created_out);
        drop(self.dir);
        if created {
            let _ = std::fs::remove_dir(out);
        }
    }
}

/// Number formatting shared by all CSV outputs.
pub(crate) fn num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

fn run_staged<F>(out: &Path, body: F) -> Result<Vec<PathBuf>, CliError>
where
    F: FnOnce(&mut Staging) -> Result<(), CliError>,
{
    let mut staging = Staging::new(out)?;
    match body(&mut staging) {
        Ok(()) => staging.commit(),
        Err(e) => {
            staging.abandon();
            Err(e)
        }
    }
}

pub fn run(cli: Cli) -> Result<Vec<PathBuf>, CliError> {
    let (args, kind) = match cli.command {
        Command::Simulate(a) => {
            let file = commands::load_scenarios(&a)?;
            let out = output_dir(a.out.as_deref(), None);
            return run_staged(&out, |s| commands::simulate(&file, s));
        }
        Command::Fit(a) => (a, commands::Kind::Fit),
        Command::Analyze(a) => (a, commands::Kind::Analyze),
        Command::Balance(a) => (a, commands::Kind::Balance),
        Command::Weights(a) => (a, commands::Kind::Weights),
    };
    let config = AnalysisConfig::load(&args.config)?.resolve(&args.overrides())?;
    let out = output_dir(args.out.as_deref(), config.out.as_deref());
    run_staged(&out, |s| commands::run_analysis(kind, &config, s))
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
