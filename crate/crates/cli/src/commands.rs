use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use enfc_core::dataio::{
    filter_pg_eligible, generate_synthetic, load_embeddings, load_sites, load_trials, sites_by_trial, split_dataset,
    DatasetSplit, EmbeddingMatrix, GeneratorConfig, SiteOutcome, SplitManifest, SplitSizes, SynthDataset, TrialRecord,
};
use enfc_core::encoding::{Encoder, TrainingSet};
use enfc_core::evalmetrics::{
    calibration_csv, calibration_sweep, default_significance_grid, metrics_report, window_coverage, MetricsReport,
    PairedOutcomes,
};
use enfc_core::filterfit::{predict_duration_filterfit, FilterFitConfig, FilterFitPrediction, GradientFitConfig};
use enfc_core::models::{load_checkpoint, save_checkpoint, train, BackboneConfig, HeadKind, ModelCheckpoint, TrainConfig, TrainData};
use enfc_core::pgsim::{predict_trial_duration, SimulationRecord};
use enfc_core::{Error, Result, RngState};
use serde::{Deserialize, Serialize};

use crate::args::*;

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const SPLIT_FILE: &str = "split.json";
pub const MODEL_FILE: &str = "model.enfc";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const SIMULATIONS_FILE: &str = "simulations.jsonl";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct RunRecord<'a, A: Serialize> {
    command: &'a str,
    version: &'a str,
    args: &'a A,
}

/// Records the fully resolved arguments next to the outputs.
fn record_run(out: &Path, command: &str, args: &impl Serialize) -> Result<()> {
    write_json(
        &out.join(RUN_CONFIG_FILE),
        &RunRecord {
            command,
            version: env!("CARGO_PKG_VERSION"),
            args,
        },
    )
}

fn trials_in(dir: &Path) -> Result<Vec<TrialRecord>> {
    load_trials(dir.join(SynthDataset::TRIALS_FILE))
}

fn embeddings_in(dir: &Path) -> Result<EmbeddingMatrix> {
    load_embeddings(dir.join(SynthDataset::EMBEDDINGS_FILE))
}

fn sites_in(dir: &Path) -> Result<Vec<SiteOutcome>> {
    load_sites(dir.join(SynthDataset::SITES_FILE))
}

fn labeled(trials: &[TrialRecord]) -> Vec<TrialRecord> {
    trials
        .iter()
        .filter(|t| t.status.is_labeled() && t.actual_enrollment.is_some())
        .cloned()
        .collect()
}

/// The manifest's split, or a fresh stratified split of `pool`.
fn make_split(pool: &[TrialRecord], manifest: Option<&PathBuf>, seed: u64) -> Result<DatasetSplit> {
    match manifest {
        Some(path) => read_json::<SplitManifest>(path)?.resolve(pool),
        None => split_dataset(pool, SplitSizes::proportional(pool.len()), seed),
    }
}

fn select(trials: &[TrialRecord], sel: &Selection) -> Result<Vec<TrialRecord>> {
    let Some(path) = &sel.split else {
        return Ok(trials.to_vec());
    };
    let split = read_json::<SplitManifest>(path)?.resolve(trials)?;
    Ok(match sel.part {
        Part::Train => split.train,
        Part::Dev => split.dev,
        Part::Test => split.test,
        Part::All => split.train.into_iter().chain(split.dev).chain(split.test).collect(),
    })
}

pub fn run(cli: Cli) -> Result<()> {
    let name = cli.command.name();
    match &cli.command {
        Command::Datagen(a) => datagen(name, a),
        Command::Encode(a) => encode(name, a),
        Command::Train(a) => train_cmd(name, a),
        Command::Predict(a) => predict(name, a, None),
        Command::Interval(a) => predict(name, &a.base, Some(a.significance)),
        Command::Simulate(a) => simulate(name, a),
        Command::FitBaseline(a) => fit_baseline(name, a),
        Command::Evaluate(a) => evaluate(name, a),
        Command::Calibrate(a) => calibrate(name, a),
    }?;
    log::info!("{name} finished");
    Ok(())
}

fn datagen(name: &str, a: &DatagenArgs) -> Result<()> {
    let config = match a.profile {
        Profile::Study => GeneratorConfig::builtin(),
        Profile::PoissonGamma => GeneratorConfig::poisson_gamma(),
    };
    let data = generate_synthetic(&config, a.trials, a.common.seed)?;
    data.save(&a.out)?;
    write_json(&a.out.join("generator.json"), &config)?;
    record_run(&a.out, name, a)
}

fn encode(name: &str, a: &EncodeArgs) -> Result<()> {
    let trials = trials_in(&a.input)?;
    let embeddings = embeddings_in(&a.input)?;
    let split = make_split(&labeled(&trials), a.split.as_ref(), a.common.seed)?;
    let encoder = Encoder::fit(TrainingSet::new(&split.train), embeddings.dim())?;
    let encoded = encoder.encode_all(&trials, &embeddings)?;
    #[derive(Serialize)]
    struct Row<'a> {
        trial_id: &'a str,
        #[serde(flatten)]
        x: &'a enfc_core::encoding::EncodedTrial,
    }
    let rows: Vec<Row> = trials
        .iter()
        .zip(&encoded)
        .map(|(t, x)| Row { trial_id: &t.trial_id, x })
        .collect();
    create_dir(&a.out)?;
    write_json(&a.out.join(SPLIT_FILE), &split.manifest(a.common.seed))?;
    write_json(&a.out.join("encoder.json"), &encoder)?;
    write_jsonl(&a.out.join("features.jsonl"), &rows)?;
    record_run(&a.out, name, a)
}

fn train_cmd(name: &str, a: &TrainArgs) -> Result<()> {
    let head = HeadKind::from(a.model);
    let trials = trials_in(&a.input)?;
    let embeddings = embeddings_in(&a.input)?;
    let mut pool = labeled(&trials);
    let sites = if head == HeadKind::PoissonGamma {
        pool = filter_pg_eligible(&pool);
        log::info!("{} trials pass the Poisson-Gamma filters", pool.len());
        Some(sites_in(&a.input)?)
    } else {
        None
    };
    let mut split = make_split(&pool, a.split.as_ref(), a.common.seed)?;
    if head == HeadKind::PoissonGamma && a.split.is_some() {
        split.train = filter_pg_eligible(&split.train);
        split.dev = filter_pg_eligible(&split.dev);
        split.test = filter_pg_eligible(&split.test);
    }
    let encoder = Encoder::fit(TrainingSet::new(&split.train), embeddings.dim())?;
    let data = |part: &[TrialRecord]| -> Result<TrainData> {
        let x = encoder.encode_all(part, &embeddings)?;
        match &sites {
            Some(s) => TrainData::sites(x, part, s),
            None => TrainData::enrollment(x, part),
        }
    };
    let (train_data, dev_data) = (data(&split.train)?, data(&split.dev)?);
    let mut config = TrainConfig::for_head(head, a.common.seed);
    if let Some(v) = a.max_epochs {
        config.max_epochs = v;
    }
    if let Some(v) = a.patience {
        config.patience = v;
    }
    if let Some(v) = a.batch_size {
        config.batch_size = v;
    }
    let backbone = BackboneConfig::for_encoder(&encoder);
    let (checkpoint, report) = train(head, encoder, backbone, &config, &train_data, &dev_data)?;
    create_dir(&a.out)?;
    save_checkpoint(a.out.join(MODEL_FILE), &checkpoint)?;
    write_json(&a.out.join(SPLIT_FILE), &split.manifest(a.common.seed))?;
    write_json(&a.out.join("train_report.json"), &report)?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        #[serde(flatten)]
        args: &'a TrainArgs,
        train_config: &'a TrainConfig,
    }
    record_run(&a.out, name, &Resolved { args: a, train_config: &config })
}

fn load_model(path: &Path) -> Result<ModelCheckpoint> {
    load_checkpoint(path).map_err(|e| match e {
        Error::Io { .. } => e,
        other => Error::Data(format!("{}: {other}", path.display())),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub trial_id: String,
    pub prediction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<f64>,
}

fn predict(name: &str, a: &PredictArgs, significance: Option<f64>) -> Result<()> {
    let checkpoint = load_model(&a.checkpoint)?;
    let trials = select(&trials_in(&a.input)?, &a.selection)?;
    let embeddings = embeddings_in(&a.input)?;
    let x = checkpoint.encoder.encode_all(&trials, &embeddings)?;
    let points = checkpoint.predict_point_many(&x)?;
    let intervals = significance.map(|s| checkpoint.predict_interval_many(&x, s)).transpose()?;
    let rows: Vec<PredictionRow> = trials
        .iter()
        .zip(points)
        .enumerate()
        .map(|(i, (t, p))| {
            let iv = intervals.as_ref().map(|v| v[i]);
            PredictionRow {
                trial_id: t.trial_id.clone(),
                prediction: p,
                lower: iv.map(|v| v.lower),
                upper: iv.map(|v| v.upper),
                level: iv.map(|v| v.level),
            }
        })
        .collect();
    create_dir(&a.out)?;
    write_jsonl(&a.out.join(PREDICTIONS_FILE), &rows)?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        #[serde(flatten)]
        args: &'a PredictArgs,
        significance: Option<f64>,
    }
    record_run(&a.out, name, &Resolved { args: a, significance })
}

/// Per-trial seed, so adding or removing trials leaves the others alone.
fn trial_seed(seed: u64, trial_id: &str) -> u64 {
    let h = trial_id
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    RngState::new(seed).split(h).seed()
}

fn simulate(name: &str, a: &SimulateArgs) -> Result<()> {
    let b = &a.base;
    let checkpoint = load_model(&b.checkpoint)?;
    if checkpoint.head != HeadKind::PoissonGamma {
        return Err(Error::Usage(format!(
            "simulate needs a poisson-gamma model, {} holds a {} model",
            b.checkpoint.display(),
            checkpoint.head.name()
        )));
    }
    let trials = select(&trials_in(&b.input)?, &b.selection)?;
    let embeddings = embeddings_in(&b.input)?;
    let rows = trials
        .iter()
        .map(|t| {
            let seed = trial_seed(b.common.seed, &t.trial_id);
            predict_trial_duration(&checkpoint, t, &embeddings, a.sim.replications, a.sim.cap_months, seed)
        })
        .collect::<Result<Vec<SimulationRecord>>>()?;
    create_dir(&b.out)?;
    write_jsonl(&b.out.join(SIMULATIONS_FILE), &rows)?;
    record_run(&b.out, name, a)
}

fn fit_baseline(name: &str, a: &FitBaselineArgs) -> Result<()> {
    let trials = trials_in(&a.input)?;
    let sites = sites_in(&a.input)?;
    let by_trial = sites_by_trial(&sites);
    let queries = select(&trials, &a.selection)?;
    let corpus = match &a.selection.split {
        Some(path) => read_json::<SplitManifest>(path)?.resolve(&trials)?.train,
        None => trials.clone(),
    };
    let corpus = filter_pg_eligible(&labeled(&corpus));
    let mut rows: Vec<FilterFitPrediction> = Vec::new();
    let mut skipped = Vec::new();
    for q in &queries {
        let config = FilterFitConfig {
            min_samples: a.min_samples,
            fit: GradientFitConfig {
                seed: a.common.seed,
                ..GradientFitConfig::default()
            },
            replications: a.sim.replications,
            cap_months: a.sim.cap_months,
            seed: trial_seed(a.common.seed, &q.trial_id),
            ..FilterFitConfig::default()
        };
        match predict_duration_filterfit(q, &corpus, &by_trial, &config) {
            Ok(p) => rows.push(p),
            Err(e @ Error::InsufficientData { .. }) => {
                log::warn!("{e}");
                skipped.push(q.trial_id.clone());
            }
            Err(e) => return Err(e),
        }
    }
    if !skipped.is_empty() {
        log::warn!("{} of {} queries skipped for lack of similar-site data", skipped.len(), queries.len());
    }
    create_dir(&a.out)?;
    write_jsonl(&a.out.join(SIMULATIONS_FILE), &rows)?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        #[serde(flatten)]
        args: &'a FitBaselineArgs,
        corpus_trials: usize,
        queries: usize,
        skipped: &'a [String],
    }
    record_run(
        &a.out,
        name,
        &Resolved {
            args: a,
            corpus_trials: corpus.len(),
            queries: queries.len(),
            skipped: &skipped,
        },
    )
}

/// A line of a predictions or simulations file.
enum Scored {
    Enrollment(PredictionRow),
    /// Median simulated duration.
    Duration { trial_id: String, p50: f64 },
}

fn read_scored(path: &Path) -> Result<Vec<Scored>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, msg: String| Error::MalformedRecord {
        path: path.to_path_buf(),
        line,
        message: msg,
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| bad(i + 1, e.to_string()))?;
        let row = if let Some(p50) = v.pointer("/quantiles/p50").and_then(|x| x.as_f64()) {
            let trial_id = v["trial_id"]
                .as_str()
                .ok_or_else(|| bad(i + 1, "missing trial_id".into()))?
                .to_string();
            Scored::Duration { trial_id, p50 }
        } else {
            Scored::Enrollment(serde_json::from_value(v).map_err(|e| bad(i + 1, e.to_string()))?)
        };
        out.push(row);
    }
    Ok(out)
}

#[derive(Serialize)]
struct EvaluationReport {
    target: &'static str,
    n: usize,
    skipped: usize,
    #[serde(flatten)]
    metrics: MetricsReport,
    window_months: f64,
    coverage_window: f64,
}

fn evaluate(name: &str, a: &EvaluateArgs) -> Result<()> {
    let trials = trials_in(&a.input)?;
    let by_id: HashMap<&str, &TrialRecord> = trials.iter().map(|t| (t.trial_id.as_str(), t)).collect();
    let scored = read_scored(&a.predictions)?;
    if scored.is_empty() {
        return Err(Error::Data(format!("{} has no predictions", a.predictions.display())));
    }
    let durations = matches!(scored[0], Scored::Duration { .. });
    let (mut truth, mut pred, mut intervals) = (Vec::new(), Vec::new(), Vec::new());
    let mut skipped = 0;
    for s in &scored {
        let (id, p, iv) = match s {
            Scored::Enrollment(r) if !durations => (&r.trial_id, r.prediction, r.lower.zip(r.upper).zip(r.level)),
            Scored::Duration { trial_id, p50 } if durations => (trial_id, *p50, None),
            _ => return Err(Error::Data("predictions file mixes enrollment and duration rows".into())),
        };
        let trial = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::Data(format!("prediction for unknown trial {id}")))?;
        let y = if durations {
            trial.duration_months
        } else {
            trial.actual_enrollment.map(f64::from)
        };
        let Some(y) = y else {
            skipped += 1;
            continue;
        };
        truth.push(y);
        pred.push(p);
        if let Some(((lower, upper), level)) = iv {
            intervals.push(enfc_core::models::PredictionInterval { lower, upper, level });
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} prediction(s) without a recorded outcome left out");
    }
    let n = truth.len();
    let mut pairs = PairedOutcomes::new(truth, pred)?;
    if !intervals.is_empty() {
        pairs = pairs.with_intervals(intervals)?;
    }
    let report = EvaluationReport {
        target: if durations { "duration_months" } else { "enrollment" },
        n,
        skipped,
        metrics: metrics_report(&pairs)?,
        window_months: a.window_months,
        coverage_window: window_coverage(&pairs, a.window_months)?,
    };
    create_dir(&a.out)?;
    write_json(&a.out.join("metrics.json"), &report)?;
    record_run(&a.out, name, a)
}

fn calibrate(name: &str, a: &CalibrateArgs) -> Result<()> {
    let b = &a.base;
    let checkpoint = load_model(&b.checkpoint)?;
    let trials = labeled(&select(&trials_in(&b.input)?, &b.selection)?);
    let embeddings = embeddings_in(&b.input)?;
    let x = checkpoint.encoder.encode_all(&trials, &embeddings)?;
    let truth: Vec<f64> = trials.iter().filter_map(|t| t.actual_enrollment.map(f64::from)).collect();
    let grid = default_significance_grid();
    let rows = calibration_sweep(&checkpoint, &x, &truth, &grid)?;
    create_dir(&b.out)?;
    let path = b.out.join("calibration.csv");
    fs::write(&path, calibration_csv(&rows)).map_err(|e| Error::io(&path, e))?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        #[serde(flatten)]
        args: &'a PredictArgs,
        significance_grid: &'a [f64],
    }
    record_run(&b.out, name, &Resolved { args: b, significance_grid: &grid })
}
