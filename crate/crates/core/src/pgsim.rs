//! Poisson-Gamma enrollment simulation.
//!
//! A trial has `n_sites` sites; site `s` opens at a Gamma-distributed
//! startup time θ_s and then enrolls as a Poisson process with a
//! Gamma-distributed monthly rate μ_s. Time advances in steps of
//! `time_step` months and a site contributes in proportion to the part of
//! the step after θ_s. The duration is the end of the first step at which
//! cumulative enrollment reaches the target, or the cap if it never does.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{EmbeddingMatrix, TrialRecord};
use crate::error::{domain, Error, Result};
use crate::models::ModelCheckpoint;
use crate::randdist::{poisson_sample_unchecked, GammaParams, RngState};

pub const DEFAULT_CAP_MONTHS: f64 = 72.0;
pub const DEFAULT_REPLICATIONS: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub n_sites: usize,
    pub target: u64,
    pub rate_dist: GammaParams,
    pub startup_dist: GammaParams,
    pub time_step: f64,
    pub cap_months: f64,
}

impl SimSpec {
    /// Monthly steps and the default 72-month cap.
    pub fn new(n_sites: usize, target: u64, rate_dist: GammaParams, startup_dist: GammaParams) -> Self {
        Self {
            n_sites,
            target,
            rate_dist,
            startup_dist,
            time_step: 1.0,
            cap_months: DEFAULT_CAP_MONTHS,
        }
    }

    pub fn with_cap(mut self, cap_months: f64) -> Self {
        self.cap_months = cap_months;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sites == 0 {
            return Err(domain("a simulated trial needs at least one site"));
        }
        if self.target == 0 {
            return Err(domain("target enrollment must be at least 1"));
        }
        validate_clock(self.time_step, self.cap_months)
    }
}

fn validate_clock(time_step: f64, cap_months: f64) -> Result<()> {
    if !(time_step > 0.0) || !time_step.is_finite() {
        return Err(domain(format!("time step must be positive, got {time_step}")));
    }
    if !(cap_months >= time_step) || !cap_months.is_finite() {
        return Err(domain(format!("cap {cap_months} must be at least one time step")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub duration_months: f64,
    pub censored: bool,
    /// Cumulative enrollment at the end of each step, when requested.
    pub trajectory: Option<Vec<u64>>,
}

/// One replication with Gamma-drawn site rates and startup times.
pub fn simulate_once(spec: &SimSpec, rng: &mut RngState) -> Result<SimResult> {
    spec.validate()?;
    Ok(simulate_unchecked(spec, rng, false))
}

/// As [`simulate_once`], also returning the cumulative trajectory.
pub fn simulate_trajectory(spec: &SimSpec, rng: &mut RngState) -> Result<SimResult> {
    spec.validate()?;
    Ok(simulate_unchecked(spec, rng, true))
}

fn simulate_unchecked(spec: &SimSpec, rng: &mut RngState, record: bool) -> SimResult {
    let mut sites: Vec<(f64, f64)> = (0..spec.n_sites)
        .map(|_| {
            let mu = spec.rate_dist.sample(rng);
            let theta = spec.startup_dist.sample(rng);
            (theta, mu)
        })
        .collect();
    run_sites(&mut sites, spec.target, spec.time_step, spec.cap_months, rng, record)
}

/// Simulation with given per-site rates and startup times instead of Gamma
/// draws. Exists for exact oracle tests.
pub fn simulate_with_sites(
    rates: &[f64],
    startups: &[f64],
    target: u64,
    time_step: f64,
    cap_months: f64,
    rng: &mut RngState,
    record: bool,
) -> Result<SimResult> {
    if rates.len() != startups.len() || rates.is_empty() {
        return Err(domain("rates and startups must be nonempty and of equal length"));
    }
    if rates.iter().chain(startups).any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(domain("site rates and startups must be finite and nonnegative"));
    }
    if target == 0 {
        return Err(domain("target enrollment must be at least 1"));
    }
    validate_clock(time_step, cap_months)?;
    let mut sites: Vec<(f64, f64)> = startups.iter().copied().zip(rates.iter().copied()).collect();
    Ok(run_sites(&mut sites, target, time_step, cap_months, rng, record))
}

/// `sites` holds (startup, rate) pairs. The monthly total of independent
/// Poisson site counts is drawn as one Poisson with the summed mean.
fn run_sites(
    sites: &mut [(f64, f64)],
    target: u64,
    dt: f64,
    cap: f64,
    rng: &mut RngState,
    record: bool,
) -> SimResult {
    sites.sort_by(|a, b| a.0.total_cmp(&b.0));
    let steps = (cap / dt + 1e-9).floor() as usize;
    let mut trajectory = record.then(|| Vec::with_capacity(steps));
    let mut full_rate = 0.0;
    let mut next = 0;
    let mut total = 0u64;
    for t in 1..=steps {
        let start = (t - 1) as f64 * dt;
        let end = t as f64 * dt;
        while next < sites.len() && sites[next].0 <= start {
            full_rate += sites[next].1;
            next += 1;
        }
        let mut partial = 0.0;
        for &(theta, mu) in &sites[next..] {
            if theta >= end {
                break;
            }
            partial += mu * (end - theta) / dt;
        }
        total += poisson_sample_unchecked((full_rate + partial) * dt, rng);
        if let Some(tr) = trajectory.as_mut() {
            tr.push(total);
        }
        if total >= target {
            return SimResult {
                duration_months: end,
                censored: false,
                trajectory,
            };
        }
    }
    SimResult {
        duration_months: cap,
        censored: true,
        trajectory,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DurationQuantiles {
    pub p05: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p95: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DurationSummary {
    pub mean: f64,
    pub quantiles: DurationQuantiles,
    pub censor_fraction: f64,
    pub replications: usize,
    pub seed: u64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Replication `i` runs on stream `i` of the seed, so the summary does not
/// depend on scheduling.
pub fn estimate_duration(spec: &SimSpec, replications: usize, seed: u64) -> Result<DurationSummary> {
    spec.validate()?;
    if replications == 0 {
        return Err(Error::Usage("replications must be positive".into()));
    }
    let root = RngState::new(seed);
    let results: Vec<(f64, bool)> = (0..replications)
        .into_par_iter()
        .map(|i| {
            let r = simulate_unchecked(spec, &mut root.split(i as u64), false);
            (r.duration_months, r.censored)
        })
        .collect();
    let mut durations: Vec<f64> = results.iter().map(|r| r.0).collect();
    let censored = results.iter().filter(|r| r.1).count();
    durations.sort_by(f64::total_cmp);
    let mean = durations.iter().sum::<f64>() / replications as f64;
    let q = |p| quantile_sorted(&durations, p);
    Ok(DurationSummary {
        mean,
        quantiles: DurationQuantiles {
            p05: q(0.05),
            p25: q(0.25),
            p50: q(0.5),
            p75: q(0.75),
            p95: q(0.95),
        },
        censor_fraction: censored as f64 / replications as f64,
        replications,
        seed,
    })
}

/// Simulation output for one trial, as emitted by the command line tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRecord {
    pub trial_id: String,
    pub rate_dist: GammaParams,
    pub startup_dist: GammaParams,
    #[serde(flatten)]
    pub summary: DurationSummary,
}

/// Checks that a trial has what the simulator needs.
pub fn trial_sim_inputs(trial: &TrialRecord) -> Result<(usize, u64)> {
    if trial.planned_sites == 0 || trial.planned_participants == 0 {
        return Err(Error::Data(format!(
            "trial {} needs planned sites and a target enrollment",
            trial.trial_id
        )));
    }
    Ok((trial.planned_sites as usize, trial.planned_participants as u64))
}

/// Site distributions from a Poisson-Gamma checkpoint, then simulation
/// with the trial's planned sites and target enrollment.
pub fn predict_trial_duration(
    checkpoint: &ModelCheckpoint,
    trial: &TrialRecord,
    embeddings: &EmbeddingMatrix,
    replications: usize,
    cap_months: f64,
    seed: u64,
) -> Result<SimulationRecord> {
    let (n_sites, target) = trial_sim_inputs(trial)?;
    let (encoded, _) = checkpoint.encoder.encode(trial, embeddings)?;
    let p = checkpoint.predict_site_params(&encoded)?;
    let spec = SimSpec::new(n_sites, target, p.rate_dist, p.startup_dist).with_cap(cap_months);
    Ok(SimulationRecord {
        trial_id: trial.trial_id.clone(),
        rate_dist: p.rate_dist,
        startup_dist: p.startup_dist,
        summary: estimate_duration(&spec, replications, seed)?,
    })
}
