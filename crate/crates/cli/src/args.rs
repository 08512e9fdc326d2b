//! Command-line surface. Flags override values from `--config`.

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::net::SocketAddr;
use std::path::PathBuf;

use bci_core::dataset::SplitMode;

#[derive(Debug, Parser)]
#[command(name = "bci", version, about = "Motor-imagery BCI engine: record, train, sweep, validate and serve")]
pub struct Cli {
    /// TOML file with defaults for any section (seed, synth, plan, model, split, sweep).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice; drawn from entropy and printed when omitted.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic raw recording (labels follow a random cue schedule).
    Simulate(SimulateArgs),
    /// Run acquisition, pipeline and game headlessly and write a session file.
    Record(RecordArgs),
    /// Consolidate sessions, balance, split, train and evaluate a model.
    Train(TrainArgs),
    /// Resumable CNN grid sweep over convolution blocks and dense width.
    Sweep(SweepArgs),
    /// Record, fit, model-controlled play and rating; appends a table row.
    Validate(ValidateArgs),
    /// Re-derive labels (and optionally predictions) for a stored session.
    Replay(ReplayArgs),
    /// Summarize stored sessions.
    Report(ReportArgs),
    /// Serve the HTTP/WebSocket game interface.
    Serve(ServeArgs),
}

/// Where samples come from: `synthetic`, `file:PATH` (raw recording),
/// `tcp:HOST:PORT`, or `serial:PATH`.
#[derive(Debug, Clone, PartialEq)]
pub enum SourceSpec {
    Synthetic,
    File(PathBuf),
    Tcp(String),
    Serial(PathBuf),
}

impl std::str::FromStr for SourceSpec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "synthetic" {
            return Ok(SourceSpec::Synthetic);
        }
        match s.split_once(':') {
            Some(("file", p)) if !p.is_empty() => Ok(SourceSpec::File(p.into())),
            Some(("tcp", a)) if !a.is_empty() => Ok(SourceSpec::Tcp(a.into())),
            Some(("serial", p)) if !p.is_empty() => Ok(SourceSpec::Serial(p.into())),
            _ => Err(format!(
                "unknown source {s:?}; use synthetic, file:PATH, tcp:HOST:PORT or serial:PATH"
            )),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SourceArgs {
    #[arg(long, default_value = "synthetic")]
    pub source: SourceSpec,
    /// Synthetic mu attenuation depth (0..1).
    #[arg(long)]
    pub mu_depth: Option<f64>,
    /// Synthetic background noise RMS, µV.
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelChoice {
    Knn,
    Lda,
    Cnn,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum)]
    pub model_kind: Option<ModelChoice>,
    /// KNN neighbours.
    #[arg(long)]
    pub k: Option<usize>,
    /// LDA covariance shrinkage.
    #[arg(long)]
    pub shrinkage: Option<f64>,
    /// CNN convolution blocks (1..4).
    #[arg(long)]
    pub n_convs: Option<usize>,
    /// CNN hidden dense width.
    #[arg(long)]
    pub dense_len: Option<usize>,
    #[command(flatten)]
    pub train: TrainArgsCommon,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgsCommon {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Stop CNN training once an epoch reaches this training accuracy.
    #[arg(long)]
    pub early_stop: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Recording length, seconds.
    #[arg(long, default_value_t = 60.0)]
    pub duration: f64,
    /// Output raw recording.
    #[arg(long)]
    pub out: PathBuf,
    /// Shortest and longest cue block, seconds.
    #[arg(long, default_value_t = 4.0)]
    pub block_min: f64,
    #[arg(long, default_value_t = 8.0)]
    pub block_max: f64,
    #[arg(long)]
    pub mu_depth: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OperatorChoice {
    /// Hold keys along a random cue schedule.
    Script,
    /// Chase the falling box.
    Follow,
}

#[derive(Debug, Clone, Args)]
pub struct RecordArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    /// Session length, seconds (default: the plan's training duration).
    #[arg(long)]
    pub duration: Option<f64>,
    /// Output session file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "script")]
    pub operator: OperatorChoice,
    #[arg(long, default_value_t = 4.0)]
    pub block_min: f64,
    #[arg(long, default_value_t = 8.0)]
    pub block_max: f64,
    #[arg(long)]
    pub session_id: Option<String>,
    #[arg(long)]
    pub subject_id: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Session files or glob patterns.
    #[arg(long, num_args = 1.., required = true)]
    pub sessions: Vec<String>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Fraction of each session's frames to keep before balancing.
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub split: Option<SplitMode>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Output model file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    /// Session files or glob patterns.
    #[arg(long, num_args = 1.., required = true)]
    pub sessions: Vec<String>,
    /// Consolidation fractions; one dataset per value.
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    /// Grid, e.g. `n=1..4,l=100,200,400`.
    #[arg(long)]
    pub grid: Option<String>,
    /// Parallel cells (0 = all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Stop after this many new cells; rerun to resume.
    #[arg(long)]
    pub max_new_cells: Option<usize>,
    #[arg(long)]
    pub split: Option<SplitMode>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[command(flatten)]
    pub train: TrainArgsCommon,
    /// Output directory (markers, sweep.csv, summary.csv).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ValidateModel {
    Knn,
    Lda,
    /// Transfer the dense layers of the `--model` CNN.
    Cnn,
    /// Constant "none" command (reference controller).
    Baseline,
}

#[derive(Debug, Clone, Args)]
pub struct ValidateArgs {
    /// Pre-trained CNN for transfer.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub model_kind: Option<ValidateModel>,
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub train: TrainArgsCommon,
    #[arg(long)]
    pub record_s: Option<f64>,
    #[arg(long)]
    pub control_s: Option<f64>,
    /// Prediction smoothing window; 1 uses raw argmax.
    #[arg(long)]
    pub smoothing: Option<usize>,
    /// Responsiveness rating 1-5; omitted marks the row incomplete.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=5))]
    pub rating: Option<u8>,
    #[arg(long)]
    pub session_id: Option<String>,
    #[arg(long)]
    pub subject_id: Option<String>,
    /// Output directory (session file and validation.csv).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    /// Session file to check.
    #[arg(long)]
    pub session: PathBuf,
    /// Also score this model on the stored frames.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Session files or glob patterns.
    #[arg(long, num_args = 1.., required = true)]
    pub sessions: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    /// Directory for finished session files.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Pre-trained model for demo sessions and CNN transfer.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn source_specs() {
        assert_eq!("synthetic".parse(), Ok(SourceSpec::Synthetic));
        assert_eq!("file:a.bcir".parse(), Ok(SourceSpec::File("a.bcir".into())));
        assert_eq!("tcp:localhost:9000".parse(), Ok(SourceSpec::Tcp("localhost:9000".into())));
        assert!("usb".parse::<SourceSpec>().is_err());
        assert!("file:".parse::<SourceSpec>().is_err());
    }

    #[test]
    fn parser_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
