//! Command-line driver for the condflow toy experiments.
//!
//! [`run_command`] is the whole program: it parses arguments, runs one
//! subcommand, writes its artifacts atomically and returns the exit status
//! (0 success, 1 usage or input error, 2 numerical failure, 3 acceptance
//! failure). Failures print a one-line JSON record on stderr.

pub mod commands;
pub mod config;
pub mod evaluate;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::{RunConfig, TransformChoice, VariantChoice};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Usage,
    Io,
    Numerical,
    Acceptance,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Usage,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Usage | ErrorKind::Io => 1,
            ErrorKind::Numerical => 2,
            ErrorKind::Acceptance => 3,
        }
    }

    fn record(&self) -> String {
        serde_json::json!({
            "error": {
                "kind": self.kind,
                "exit_code": self.exit_code(),
                "message": self.message,
            }
        })
        .to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<condflow::Error> for CliError {
    fn from(e: condflow::Error) -> Self {
        let kind = if e.is_numerical() {
            ErrorKind::Numerical
        } else if matches!(e, condflow::Error::Io(_)) {
            ErrorKind::Io
        } else {
            ErrorKind::Usage
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

/// Artifacts staged in memory and written together at the end of a command,
/// so a failing command leaves nothing behind.
#[derive(Default)]
pub struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, path: &Path, bytes: impl Into<Vec<u8>>) {
        self.files.push((path.to_path_buf(), bytes.into()));
    }

    pub fn commit(self) -> Result<(), CliError> {
        let mut written: Vec<PathBuf> = Vec::new();
        for (path, bytes) in &self.files {
            if let Err(e) = condflow::io::write_atomic(path, bytes) {
                for p in &written {
                    let _ = std::fs::remove_file(p);
                }
                return Err(CliError {
                    kind: ErrorKind::Io,
                    message: format!("writing {}: {e}", path.display()),
                });
            }
            written.push(path.clone());
        }
        Ok(())
    }
}

#[derive(Parser, Debug)]
#[command(name = "condflow", version, about = "Conditional normalizing-flow toy experiments")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the toy dataset as CSV plus a checksummed binary blob.
    GenData(GenDataArgs),
    /// Train a flow and write its checkpoint and loss curve.
    Train(TrainArgs),
    /// Draw samples and flag those leaving the valid box.
    Sample(SampleArgs),
    /// Per-layer feature variances for in-distribution and shifted conditions.
    VarianceTrace(TraceArgs),
    /// Rank held-out and shifted conditions by Mahalanobis OOD score.
    OodRank(RankArgs),
    /// Fit the one-layer affine problem with a bounded or unbounded scale.
    ConvexDemo(ConvexArgs),
    /// Summarize trained checkpoints against the pass/fail thresholds.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug, Default)]
pub struct DataArgs {
    /// Training data (CSV, or `.bin` blob); regenerated from the seed when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Number of generated training pairs.
    #[arg(long = "n-train")]
    pub n_train: Option<usize>,
    /// Seed of the held-out measurements.
    #[arg(long)]
    pub heldout_seed: Option<u64>,
}

impl DataArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(p) = &self.data {
            cfg.data.path = Some(p.clone());
        }
        set(&mut cfg.data.seed, self.data_seed);
        set(&mut cfg.problem.n_samples, self.n_train);
        if self.heldout_seed.is_some() {
            cfg.data.heldout_seed = self.heldout_seed;
        }
    }
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Leave the measurements noise-free.
    #[arg(long)]
    pub noise_free: bool,
    /// CSV output (`x1,x2,y1,y2`).
    #[arg(long)]
    pub out: PathBuf,
    /// Binary blob output; defaults to the CSV path with a `.bin` extension.
    #[arg(long)]
    pub blob: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub transform: Option<TransformChoice>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantChoice>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Loss curve CSV (`iteration,nll,grad_norm,skipped_flag`).
    #[arg(long)]
    pub loss_curve: PathBuf,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fixed condition `y1,y2`; one held-out measurement per sample otherwise.
    #[arg(long, value_parser = parse_pair, allow_hyphen_values = true)]
    pub y: Option<[f64; 2]>,
    /// Shift the conditions out of distribution.
    #[arg(long)]
    pub ood: bool,
    #[arg(long)]
    pub margin: Option<f64>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Samples CSV (`sample_index,x1,x2,escaped`).
    #[arg(long)]
    pub out: PathBuf,
    /// Clipped copy; defaults to `<out>` with a `_clipped` suffix.
    #[arg(long)]
    pub clipped_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TraceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_pair, allow_hyphen_values = true)]
    pub y: Option<[f64; 2]>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Trace CSV for the in-distribution conditions.
    #[arg(long)]
    pub out_in: PathBuf,
    /// Trace CSV for the shifted conditions.
    #[arg(long)]
    pub out_ood: PathBuf,
}

#[derive(Args, Debug)]
pub struct RankArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub n_in: Option<usize>,
    #[arg(long)]
    pub n_ood: Option<usize>,
    #[arg(long)]
    pub samples_per_input: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub margin: Option<f64>,
    /// Use the second moment about the origin instead of the covariance.
    #[arg(long)]
    pub uncentered: bool,
    #[command(flatten)]
    pub data: DataArgs,
    /// Ranking CSV (`rank,input_index,score,escape_rate`).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ConvexArgs {
    /// Scale capped at the bounded variant's upper limit.
    #[arg(long, conflicts_with = "unbounded", required_unless_present = "unbounded")]
    pub bounded: bool,
    /// Scale `exp(r)` with no upper limit.
    #[arg(long)]
    pub unbounded: bool,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Trajectory CSV (`iteration,s,t,objective`).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Affine checkpoint; repeat for several seeds. The first is compared
    /// against the spline model.
    #[arg(long)]
    pub affine: Vec<PathBuf>,
    #[arg(long)]
    pub spline: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override a threshold, `name=value`.
    #[arg(long, value_parser = parse_threshold)]
    pub threshold: Vec<(String, f64)>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Summary JSON.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').collect();
    match parts.as_slice() {
        [a, b] => Ok([
            a.trim().parse().map_err(|e| format!("`{a}`: {e}"))?,
            b.trim().parse().map_err(|e| format!("`{b}`: {e}"))?,
        ]),
        _ => Err("expected two comma-separated numbers".into()),
    }
}

fn parse_threshold(s: &str) -> Result<(String, f64), String> {
    let (name, value) = s.split_once('=').ok_or("expected name=value")?;
    Ok((name.to_string(), value.parse().map_err(|e| format!("`{value}`: {e}"))?))
}

pub(crate) fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let err = CliError::usage(e.to_string().trim_end().to_string());
            eprintln!("{}", err.record());
            return err.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.record());
            e.exit_code()
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    let mut outputs = Outputs::default();
    let verdict = match cli.command {
        Command::GenData(a) => commands::gen_data(&mut cfg, a, &mut outputs),
        Command::Train(a) => commands::train(&mut cfg, a, &mut outputs),
        Command::Sample(a) => commands::sample(&mut cfg, a, &mut outputs),
        Command::VarianceTrace(a) => commands::variance_trace(&mut cfg, a, &mut outputs),
        Command::OodRank(a) => commands::ood_rank(&mut cfg, a, &mut outputs),
        Command::ConvexDemo(a) => commands::convex_demo(&mut cfg, a, &mut outputs),
        Command::Evaluate(a) => commands::evaluate(&mut cfg, a, &mut outputs),
    }?;
    outputs.commit()?;
    if let Some(summary) = verdict.stdout {
        println!("{summary}");
    }
    verdict.failure.map_or(Ok(()), Err)
}

/// What a command leaves for the caller once its outputs are written.
#[derive(Default)]
pub struct Done {
    /// One JSON line for stdout.
    pub stdout: Option<String>,
    /// Failure reported after the artifacts are on disk.
    pub failure: Option<CliError>,
}

impl Done {
    pub fn print(value: &impl Serialize) -> Result<Self, CliError> {
        Ok(Self {
            stdout: Some(serde_json::to_string(value).map_err(|e| CliError::usage(e.to_string()))?),
            failure: None,
        })
    }
}
