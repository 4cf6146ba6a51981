use std::ffi::OsString;
use std::path::PathBuf;

use clap::parser::ValueSource;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use enfc_core::models::HeadKind;
use enfc_core::pgsim::{DEFAULT_CAP_MONTHS, DEFAULT_REPLICATIONS};
use enfc_core::Error;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "enfc", version, about = "Clinical-trial enrollment forecasting")]
#[command(after_help = "Set ENFC_LOG (error, warn, info, debug, trace) to control logging.")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus of trials, sites and embeddings.
    Datagen(DatagenArgs),
    /// Split labeled trials, fit the feature encoder and write encoded features.
    Encode(EncodeArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Point predictions of enrollment.
    Predict(PredictArgs),
    /// Enrollment prediction intervals from a stochastic model.
    Interval(IntervalArgs),
    /// Trial-duration simulation from a Poisson-Gamma model.
    Simulate(SimulateArgs),
    /// Filter-and-fit duration baseline.
    FitBaseline(FitBaselineArgs),
    /// Metrics for a predictions file.
    Evaluate(EvaluateArgs),
    /// Interval accuracy and width over a grid of significance levels.
    Calibrate(CalibrateArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Datagen(_) => "datagen",
            Command::Encode(_) => "encode",
            Command::Train(_) => "train",
            Command::Predict(_) => "predict",
            Command::Interval(_) => "interval",
            Command::Simulate(_) => "simulate",
            Command::FitBaseline(_) => "fit-baseline",
            Command::Evaluate(_) => "evaluate",
            Command::Calibrate(_) => "calibrate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Deterministic,
    Stochastic,
    PoissonGamma,
}

impl From<ModelKind> for HeadKind {
    fn from(m: ModelKind) -> Self {
        match m {
            ModelKind::Deterministic => HeadKind::Deterministic,
            ModelKind::Stochastic => HeadKind::Gamma,
            ModelKind::PoissonGamma => HeadKind::PoissonGamma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Trial-level enrollment corpus.
    Study,
    /// Site-level corpus for duration experiments.
    PoissonGamma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Part {
    Train,
    Dev,
    Test,
    All,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Common {
    /// Seed for every random choice of the run.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// TOML file of flag defaults (keys are flag names); explicit flags win.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Selection {
    /// Split manifest (split.json from encode or train).
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Which part of the split to use; without --split every trial is used.
    #[arg(long, value_enum, default_value_t = Part::Test)]
    pub part: Part,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimArgs {
    /// Monte Carlo replications per trial.
    #[arg(long, default_value_t = DEFAULT_REPLICATIONS)]
    pub replications: usize,
    /// Simulation horizon; trials unfinished by then are censored.
    #[arg(long, default_value_t = DEFAULT_CAP_MONTHS)]
    pub cap_months: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DatagenArgs {
    /// Number of trials.
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, value_enum, default_value_t = Profile::Study)]
    pub profile: Profile,
    /// Output directory.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EncodeArgs {
    /// Dataset directory (trials.jsonl, embeddings.emb).
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Reuse this split manifest instead of drawing a new split.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset directory (trials.jsonl, sites.jsonl, embeddings.emb).
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = ModelKind::Deterministic)]
    pub model: ModelKind,
    /// Split manifest; drawn from the seed when absent.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Override the model's default epoch budget.
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Override the early-stopping patience.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Override the batch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Model file written by train.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub selection: Selection,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct IntervalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub base: PredictArgs,
    /// Interval significance α; the level is 1 − α.
    #[arg(long, default_value_t = 0.1)]
    pub significance: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub base: PredictArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub sim: SimArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitBaselineArgs {
    /// Dataset directory (trials.jsonl, sites.jsonl).
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Queries come from --part; the corpus is the train part.
    #[command(flatten)]
    #[serde(flatten)]
    pub selection: Selection,
    #[command(flatten)]
    #[serde(flatten)]
    pub sim: SimArgs,
    /// Pooled site samples required before fitting.
    #[arg(long, default_value_t = enfc_core::filterfit::DEFAULT_MIN_SAMPLES)]
    pub min_samples: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    /// Dataset directory holding the true outcomes.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// predictions.jsonl or simulations.jsonl.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Window for duration coverage, in months.
    #[arg(long, default_value_t = 6.0)]
    pub window_months: f64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CalibrateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub base: PredictArgs,
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Parses `argv`, filling flags absent from the command line from the
/// `--config` file.
pub fn parse(argv: Vec<OsString>) -> Result<Cli, ParseError> {
    let matches = Cli::command().try_get_matches_from(&argv)?;
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let Some(path) = sub.get_one::<PathBuf>("config") else {
        return Ok(Cli::from_arg_matches(&matches)?);
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let table: toml::Table = text.parse().map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    let cmd = Cli::command();
    let known: Vec<String> = cmd
        .find_subcommand(name)
        .expect("parsed subcommand exists")
        .get_arguments()
        .map(|a| a.get_id().to_string())
        .collect();
    let mut extra = Vec::new();
    for (key, value) in table {
        let id = if key == "in" { "input".to_string() } else { key.replace('-', "_") };
        if !known.contains(&id) || id == "config" {
            return Err(config_error(format!("{}: unknown key {key:?} for {name}", path.display())).into());
        }
        if sub.value_source(&id) == Some(ValueSource::CommandLine) {
            continue;
        }
        let text = match value {
            toml::Value::String(s) => s,
            toml::Value::Integer(i) => i.to_string(),
            toml::Value::Float(f) => f.to_string(),
            other => return Err(config_error(format!("{}: unsupported value for {key}: {other}", path.display())).into()),
        };
        let flag = if id == "input" { "in".to_string() } else { id.replace('_', "-") };
        extra.push(OsString::from(format!("--{flag}")));
        extra.push(OsString::from(text));
    }
    let mut full = argv;
    full.extend(extra);
    let matches = Cli::command().try_get_matches_from(full)?;
    Ok(Cli::from_arg_matches(&matches)?)
}

#[derive(Debug)]
pub enum ParseError {
    Clap(clap::Error),
    Core(Error),
}

impl From<clap::Error> for ParseError {
    fn from(e: clap::Error) -> Self {
        ParseError::Clap(e)
    }
}

impl From<Error> for ParseError {
    fn from(e: Error) -> Self {
        ParseError::Core(e)
    }
}
