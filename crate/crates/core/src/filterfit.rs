//! Filter-and-fit baseline: pool site outcomes from historical trials that
//! overlap the query on every key feature, fit Gamma distributions to the
//! pooled rates and startup times, and simulate.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dataio::{SiteOutcome, TrialRecord};
use crate::diffgraph::{GammaTarget, Graph, Mode, OptimizerKind, OptimizerState, ParamStore, Tensor};
use crate::encoding::KeyFeature;
use crate::error::{domain, Error, Result};
use crate::pgsim::{estimate_duration, trial_sim_inputs, SimSpec, SimulationRecord, DEFAULT_CAP_MONTHS, DEFAULT_REPLICATIONS};
use crate::randdist::{GammaParams, RngState};
use crate::specfun::digamma;

/// Added to every pooled rate and startup time so zeros stay in the
/// Gamma support.
pub const SAMPLE_SHIFT: f64 = 1e-6;
pub const DEFAULT_MIN_SAMPLES: usize = 30;
const NEWTON_MAX_ITER: usize = 100;
const NEWTON_TOL: f64 = 1e-10;

/// Corpus trials whose label sets intersect the query's on every feature in
/// `features`. The query itself (same trial id) is never returned.
pub fn find_similar<'a>(query: &TrialRecord, corpus: &'a [TrialRecord], features: &[KeyFeature]) -> Vec<&'a TrialRecord> {
    corpus
        .iter()
        .filter(|c| c.trial_id != query.trial_id)
        .filter(|c| {
            features
                .iter()
                .all(|f| !f.labels(query).is_disjoint(f.labels(c)))
        })
        .collect()
}

fn sample_moments(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData {
            what: "gamma fit samples".into(),
            have: samples.len(),
            need: 2,
        });
    }
    if samples.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
        return Err(domain("gamma fit samples must be finite and positive"));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let mean_ln = samples.iter().map(|x| x.ln()).sum::<f64>() / n;
    if samples.iter().all(|&x| x == samples[0]) {
        return Err(Error::DegenerateData("gamma fit samples have zero variance".into()));
    }
    Ok((mean, mean_ln))
}

/// ψ'(x) by upward recurrence and the asymptotic series.
fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let r = 1.0 / (x * x);
    acc + 1.0 / x + r / 2.0 + r / x * (1.0 / 6.0 - r * (1.0 / 30.0 - r * (1.0 / 42.0 - r * (1.0 / 30.0 - r * 5.0 / 66.0))))
}

/// Maximum-likelihood Gamma fit by Newton's method on
/// ln α − ψ(α) = ln(mean) − mean(ln x).
pub fn fit_gamma_newton(samples: &[f64]) -> Result<GammaParams> {
    let (mean, mean_ln) = sample_moments(samples)?;
    let s = mean.ln() - mean_ln;
    if !(s > 0.0) {
        return Err(Error::DegenerateData(format!("log-mean gap {s} is not positive")));
    }
    let mut a = GammaParams::approx_mle(mean, mean_ln)?.shape;
    for _ in 0..NEWTON_MAX_ITER {
        let f = a.ln() - digamma(a)? - s;
        let df = 1.0 / a - trigamma(a);
        let mut next = a - f / df;
        if !(next > 0.0) {
            next = a / 2.0;
        }
        let delta = (next - a).abs();
        a = next;
        if delta <= NEWTON_TOL * a {
            return GammaParams::new(a, a / mean);
        }
    }
    Err(Error::Numeric(format!("gamma Newton fit did not converge in {NEWTON_MAX_ITER} iterations")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradientFitConfig {
    /// Peak learning rate; it decays to zero on a cosine schedule.
    pub lr: f64,
    /// Squared-gradient averaging factor.
    pub decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for GradientFitConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            decay: 0.99,
            batch_size: 128,
            epochs: 512,
            seed: 0,
        }
    }
}

/// Gamma fit by minibatch RMSprop on the log-parameters, starting from the
/// method-of-moments estimate.
pub fn fit_gamma_gradient(samples: &[f64], config: &GradientFitConfig) -> Result<GammaParams> {
    let (mean, _) = sample_moments(samples)?;
    if config.batch_size == 0 || config.epochs == 0 || !(config.lr > 0.0) || !(0.0..1.0).contains(&config.decay) {
        return Err(Error::Usage("gradient fit needs positive lr, batch size and epochs".into()));
    }
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / samples.len() as f64;
    let start = GammaParams::from_moments(mean, var)?;
    let mut params = ParamStore::new();
    params.insert("shape", Tensor::vector(vec![start.shape.ln()]));
    params.insert("rate", Tensor::vector(vec![start.rate.ln()]));

    let mut opt = OptimizerState::new(OptimizerKind::RmsProp {
        decay: config.decay,
        eps: 1e-8,
    });
    let mut rng = RngState::new(config.seed);
    let mut order = samples.to_vec();
    let batches = order.len().div_ceil(config.batch_size);
    let total = (config.epochs * batches) as f64;
    let mut step = 0usize;
    for _ in 0..config.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(config.batch_size) {
            let lr = 0.5 * config.lr * (1.0 + (std::f64::consts::PI * step as f64 / total).cos());
            step += 1;
            let target = GammaTarget::from_samples(batch)?;
            let mut g = Graph::new(Mode::Eval, 0);
            let shape = g.param_from(&params, "shape")?;
            let rate = g.param_from(&params, "rate")?;
            let loss = g.gamma_nll(shape, rate, &[target])?;
            let grads = g.backward(loss)?.into_param_map();
            opt.step(&mut params, &grads, |_| lr)?;
        }
    }
    let logit = |name: &str| params.get(name).map(|t| t.item()).unwrap_or(f64::NAN);
    GammaParams::from_logits(logit("shape"), logit("rate"))
        .map_err(|e| Error::Numeric(format!("gradient gamma fit diverged: {e}")))
}

/// Mean Gamma negative log-likelihood of the samples.
pub fn mean_gamma_nll(params: GammaParams, samples: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for &x in samples {
        total -= params.log_pdf(x)?;
    }
    Ok(total / samples.len() as f64)
}

/// Gradient fit, falling back to Newton if it fails.
fn fit_pooled(samples: &[f64], config: &GradientFitConfig) -> Result<GammaParams> {
    match fit_gamma_gradient(samples, config) {
        Ok(p) => Ok(p),
        Err(e @ (Error::InsufficientData { .. } | Error::DegenerateData(_) | Error::Domain(_))) => Err(e),
        Err(e) => {
            log::warn!("gradient gamma fit failed ({e}); using Newton");
            fit_gamma_newton(samples)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterFitConfig {
    pub features: Vec<KeyFeature>,
    pub min_samples: usize,
    pub fit: GradientFitConfig,
    pub replications: usize,
    pub cap_months: f64,
    pub seed: u64,
}

impl Default for FilterFitConfig {
    fn default() -> Self {
        Self {
            features: KeyFeature::ALL.to_vec(),
            min_samples: DEFAULT_MIN_SAMPLES,
            fit: GradientFitConfig::default(),
            replications: DEFAULT_REPLICATIONS,
            cap_months: DEFAULT_CAP_MONTHS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterFitPrediction {
    pub similar_trials: usize,
    pub site_samples: usize,
    #[serde(flatten)]
    pub record: SimulationRecord,
}

/// Filter, pool, fit and simulate for one query trial.
pub fn predict_duration_filterfit(
    query: &TrialRecord,
    corpus: &[TrialRecord],
    sites: &HashMap<&str, Vec<&SiteOutcome>>,
    config: &FilterFitConfig,
) -> Result<FilterFitPrediction> {
    let (n_sites, target) = trial_sim_inputs(query)?;
    let similar = find_similar(query, corpus, &config.features);
    let mut rates = Vec::new();
    let mut startups = Vec::new();
    for t in &similar {
        for s in sites.get(t.trial_id.as_str()).into_iter().flatten() {
            rates.push(s.rate + SAMPLE_SHIFT);
            startups.push(s.startup_months + SAMPLE_SHIFT);
        }
    }
    let need = config.min_samples.max(2);
    if rates.len() < need {
        return Err(Error::InsufficientData {
            what: format!("site samples from {} similar trial(s) for {}", similar.len(), query.trial_id),
            have: rates.len(),
            need,
        });
    }
    let rate_dist = fit_pooled(&rates, &config.fit)?;
    let startup_dist = fit_pooled(&startups, &config.fit)?;
    let spec = SimSpec::new(n_sites, target, rate_dist, startup_dist).with_cap(config.cap_months);
    Ok(FilterFitPrediction {
        similar_trials: similar.len(),
        site_samples: rates.len(),
        record: SimulationRecord {
            trial_id: query.trial_id.clone(),
            rate_dist,
            startup_dist,
            summary: estimate_duration(&spec, config.replications, config.seed)?,
        },
    })
}
