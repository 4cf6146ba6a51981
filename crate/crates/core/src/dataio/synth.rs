//! Synthetic trial corpus with known ground truth.
//!
//! Each trial draws key attributes from weighted vocabularies, a target
//! enrollment from its planned size, a log-scale deviation from
//! per-category effects plus Gaussian noise, and per-site Gamma latents for
//! enrollment rates and startup times. Sites are then simulated month by
//! month until the trial's realized enrollment is reached, which fixes the
//! duration and the site outcomes. Context text is assembled from templates
//! and embedded by a fixed random projection of its hashed token counts.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_site_rate, read_jsonl, save_embeddings, save_sites, save_trials, write_jsonl};
use super::{EmbeddingMatrix, LabelSet, SiteOutcome, TrialRecord, TrialStatus};
use crate::encoding::serialize_context;
use crate::error::{Error, Result};
use crate::randdist::{poisson_sample_unchecked, GammaParams, RngState};
use crate::specfun::std_normal_cdf;

const BUILTIN_V1: &str = include_str!("../../data/synth_v1.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrollmentConfig {
    pub deviation_scale: f64,
    pub noise_sd: f64,
    pub sites_log_shift: f64,
    pub sites_log_sd: f64,
    pub participants_per_site_log_mean: f64,
    pub participants_per_site_log_sd: f64,
    pub country_count_deviation: f64,
    pub multi_phase_probability: f64,
    pub second_ta_probability: f64,
    pub max_countries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteConfig {
    pub rate_log_base: f64,
    pub rate_latent_sd: f64,
    pub startup_log_base: f64,
    pub startup_shape: f64,
    pub startup_latent_sd: f64,
    pub country_count_startup: f64,
}

/// Overrides applied by [`GeneratorConfig::poisson_gamma`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileOverride {
    pub deviation_scale: f64,
    pub noise_sd: f64,
    pub sites_log_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub label: String,
    pub weight: f64,
    pub sites_log_mean: f64,
    pub deviation: f64,
    pub rate_log_effect: f64,
    pub rate_shape: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicationSpec {
    pub name: String,
    pub deviation: f64,
    pub rate_log_effect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaSpec {
    pub label: String,
    pub weight: f64,
    pub deviation: f64,
    pub rate_log_effect: f64,
    pub mechanisms: Vec<String>,
    pub indications: Vec<IndicationSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SponsorSpec {
    pub label: String,
    pub weight: f64,
    pub deviation: f64,
    pub rate_log_effect: f64,
    pub startup_log_effect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountrySpec {
    pub label: String,
    pub weight: f64,
    pub startup_log_effect: f64,
    pub rate_log_effect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub version: u32,
    pub embedding_dim: usize,
    pub hash_buckets: usize,
    pub projection_seed: u64,
    pub embedding_noise_sd: f64,
    /// Longest trial the generator simulates; anything still short of its
    /// enrollment then closes with the remainder booked in the final month.
    pub cap_months: f64,
    pub enrollment: EnrollmentConfig,
    pub site: SiteConfig,
    pub poisson_gamma: ProfileOverride,
    pub phase: Vec<PhaseSpec>,
    pub therapeutic_area: Vec<AreaSpec>,
    pub sponsor: Vec<SponsorSpec>,
    pub country: Vec<CountrySpec>,
}

impl GeneratorConfig {
    /// The committed version-1 coefficients.
    pub fn builtin() -> Self {
        Self::from_toml_str(BUILTIN_V1).expect("bundled generator config parses")
    }

    /// Version 1 with the Poisson-Gamma profile: no categorical deviation,
    /// near-exact target attainment and larger trials.
    pub fn poisson_gamma() -> Self {
        let mut c = Self::builtin();
        c.enrollment.deviation_scale = c.poisson_gamma.deviation_scale;
        c.enrollment.noise_sd = c.poisson_gamma.noise_sd;
        c.enrollment.sites_log_shift = c.poisson_gamma.sites_log_shift;
        c
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.phase.is_empty() || self.therapeutic_area.is_empty() || self.sponsor.is_empty() {
            return bad("phase, therapeutic_area and sponsor vocabularies must be nonempty");
        }
        if self.country.len() < self.enrollment.max_countries || self.enrollment.max_countries == 0 {
            return bad("max_countries must be in 1..=number of countries");
        }
        if self.therapeutic_area.iter().any(|a| a.indications.is_empty() || a.mechanisms.is_empty()) {
            return bad("every therapeutic area needs indications and mechanisms");
        }
        if self.embedding_dim == 0 || self.hash_buckets == 0 {
            return bad("embedding_dim and hash_buckets must be positive");
        }
        if !(self.cap_months >= 1.0) {
            return bad("cap_months must be at least one month");
        }
        Ok(())
    }

    /// Expected absolute error, relative to e^m, of the best possible point
    /// forecast of a trial whose log enrollment is m + N(0, σ²).
    pub fn noise_floor_factor(&self) -> f64 {
        let s = self.enrollment.noise_sd;
        (0.5 * s * s).exp() * (2.0 * std_normal_cdf(s) - 1.0)
    }
}

/// Ground truth for one generated trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialLatents {
    pub trial_id: String,
    /// ln(planned + 1) + deviation: the noise-free log of enrollment + 1.
    pub log_mean: f64,
    pub deviation: f64,
    pub noise_sd: f64,
    pub rate: GammaParams,
    pub startup: GammaParams,
    /// True when the simulation hit `cap_months` before reaching enrollment.
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub trials: Vec<TrialRecord>,
    pub sites: Vec<SiteOutcome>,
    pub embeddings: EmbeddingMatrix,
    pub latents: Vec<TrialLatents>,
}

impl SynthDataset {
    pub const TRIALS_FILE: &'static str = "trials.jsonl";
    pub const SITES_FILE: &'static str = "sites.jsonl";
    pub const EMBEDDINGS_FILE: &'static str = "embeddings.emb";
    pub const LATENTS_FILE: &'static str = "latents.jsonl";

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_trials(dir.join(Self::TRIALS_FILE), &self.trials)?;
        save_sites(dir.join(Self::SITES_FILE), &self.sites)?;
        save_embeddings(dir.join(Self::EMBEDDINGS_FILE), &self.embeddings)?;
        write_jsonl(dir.join(Self::LATENTS_FILE), &self.latents)
    }
}

pub fn load_latents(path: impl AsRef<Path>) -> Result<Vec<TrialLatents>> {
    read_jsonl(path)
}

struct GeneratedTrial {
    record: TrialRecord,
    sites: Vec<SiteOutcome>,
    embedding: Vec<f32>,
    latents: TrialLatents,
}

/// Generates `n_trials` trials. Trial `i` depends only on `(config, seed, i)`.
pub fn generate_synthetic(config: &GeneratorConfig, n_trials: usize, seed: u64) -> Result<SynthDataset> {
    if n_trials == 0 {
        return Err(Error::Usage("number of trials must be positive".into()));
    }
    config.validate()?;
    let projection = projection_matrix(config);
    let root = RngState::new(seed);
    let generated: Vec<GeneratedTrial> = (0..n_trials)
        .into_par_iter()
        .map(|i| generate_trial(config, &projection, i, &mut root.split(i as u64)))
        .collect();

    let mut trials = Vec::with_capacity(n_trials);
    let mut sites = Vec::new();
    let mut values = Vec::with_capacity(n_trials * config.embedding_dim);
    let mut latents = Vec::with_capacity(n_trials);
    for g in generated {
        trials.push(g.record);
        sites.extend(g.sites);
        values.extend(g.embedding);
        latents.push(g.latents);
    }
    let truncated = latents.iter().filter(|l| l.truncated).count();
    if truncated > 0 {
        log::warn!("{truncated} synthetic trial(s) reached the {} month cap", config.cap_months);
    }
    let ids = trials.iter().map(|t| t.trial_id.clone()).collect();
    let embeddings = EmbeddingMatrix::new(ids, config.embedding_dim, values)?;
    Ok(SynthDataset {
        trials,
        sites,
        embeddings,
        latents,
    })
}

fn pick_weighted(rng: &mut RngState, weights: impl Iterator<Item = f64> + Clone) -> usize {
    let total: f64 = weights.clone().sum();
    let mut u = rng.uniform() * total;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        if u < w {
            return i;
        }
        u -= w;
        last = i;
    }
    last
}

fn generate_trial(cfg: &GeneratorConfig, projection: &[f64], index: usize, rng: &mut RngState) -> GeneratedTrial {
    let en = &cfg.enrollment;
    let trial_id = format!("SYN{index:06}");

    let mut phases = vec![pick_weighted(rng, cfg.phase.iter().map(|p| p.weight))];
    if phases[0] + 1 < cfg.phase.len() && rng.uniform() < en.multi_phase_probability {
        phases.push(phases[0] + 1);
    }
    let mut areas = vec![pick_weighted(rng, cfg.therapeutic_area.iter().map(|a| a.weight))];
    if cfg.therapeutic_area.len() > 1 && rng.uniform() < en.second_ta_probability {
        let other = loop {
            let j = pick_weighted(rng, cfg.therapeutic_area.iter().map(|a| a.weight));
            if j != areas[0] {
                break j;
            }
        };
        areas.push(other);
    }
    let area = &cfg.therapeutic_area[areas[0]];
    let indication = &area.indications[rng.below(area.indications.len())];
    let mechanism = &area.mechanisms[rng.below(area.mechanisms.len())];
    let sponsor = &cfg.sponsor[pick_weighted(rng, cfg.sponsor.iter().map(|s| s.weight))];

    let n_countries = 1 + rng.below(en.max_countries);
    let mut countries: Vec<usize> = Vec::with_capacity(n_countries);
    while countries.len() < n_countries {
        let c = pick_weighted(rng, cfg.country.iter().map(|c| c.weight));
        if !countries.contains(&c) {
            countries.push(c);
        }
    }
    countries.sort_unstable();

    let phase_mean = |f: fn(&PhaseSpec) -> f64| phases.iter().map(|&p| f(&cfg.phase[p])).sum::<f64>() / phases.len() as f64;
    let area_mean = |f: fn(&AreaSpec) -> f64| {
        areas.iter().map(|&a| f(&cfg.therapeutic_area[a])).sum::<f64>() / areas.len() as f64
    };
    let country_mean = |f: fn(&CountrySpec) -> f64| {
        countries.iter().map(|&c| f(&cfg.country[c])).sum::<f64>() / countries.len() as f64
    };
    let extra_countries = (n_countries - 1) as f64;

    let sites_log = phase_mean(|p| p.sites_log_mean) + en.sites_log_shift + en.sites_log_sd * rng.standard_normal();
    let planned_sites = (sites_log.exp().round() as u32).max(1);
    let per_site = (en.participants_per_site_log_mean + en.participants_per_site_log_sd * rng.standard_normal()).exp();
    let planned = ((planned_sites as f64 * per_site).round() as u32).max(1);

    let deviation = en.deviation_scale
        * (phase_mean(|p| p.deviation)
            + area_mean(|a| a.deviation)
            + indication.deviation
            + sponsor.deviation
            + en.country_count_deviation * extra_countries);
    let log_mean = (planned as f64 + 1.0).ln() + deviation;
    let eps = en.noise_sd * rng.standard_normal();
    let enrollment = (((log_mean + eps).exp().round() - 1.0).max(1.0)) as u32;

    let sc = &cfg.site;
    let rate_mean = (sc.rate_log_base
        + phase_mean(|p| p.rate_log_effect)
        + area_mean(|a| a.rate_log_effect)
        + indication.rate_log_effect
        + sponsor.rate_log_effect
        + country_mean(|c| c.rate_log_effect)
        + sc.rate_latent_sd * rng.standard_normal())
    .exp();
    let rate_shape = phase_mean(|p| p.rate_shape);
    let rate = GammaParams::new(rate_shape, rate_shape / rate_mean).expect("positive rate latents");
    let startup_mean = (sc.startup_log_base
        + sponsor.startup_log_effect
        + country_mean(|c| c.startup_log_effect)
        + sc.country_count_startup * extra_countries
        + sc.startup_latent_sd * rng.standard_normal())
    .exp();
    let startup = GammaParams::new(sc.startup_shape, sc.startup_shape / startup_mean).expect("positive startup latents");

    let (duration, site_counts, startups, truncated) =
        simulate_sites(planned_sites as usize, enrollment, rate, startup, cfg.cap_months, rng);

    let phase_labels: Vec<&str> = phases.iter().map(|&p| cfg.phase[p].label.as_str()).collect();
    let phase_text = phase_labels.join("/");
    let exclusions = [
        format!("prior treatment with {mechanism}"),
        "pregnancy or breastfeeding".to_string(),
        "severe hepatic or renal impairment".to_string(),
        "participation in another interventional study within 30 days".to_string(),
    ];
    let ex1 = rng.below(exclusions.len());
    let ex2 = (ex1 + 1 + rng.below(exclusions.len() - 1)) % exclusions.len();

    let record = TrialRecord {
        trial_id: trial_id.clone(),
        phase: phase_labels.iter().map(|s| s.to_string()).collect(),
        countries: countries.iter().map(|&c| cfg.country[c].label.clone()).collect(),
        therapeutic_areas: areas.iter().map(|&a| cfg.therapeutic_area[a].label.clone()).collect(),
        sponsors: LabelSet::from([sponsor.label.clone()]),
        title: Some(format!("A phase {phase_text} study of {mechanism} in {}", indication.name)),
        objective: Some(format!(
            "To evaluate the efficacy and safety of {mechanism} in participants with {}, sponsored by {}",
            indication.name, sponsor.label
        )),
        mechanism_of_action: Some(mechanism.clone()),
        indication: Some(indication.name.clone()),
        inclusion_criteria: Some(format!("Adults aged 18 years or older with a confirmed diagnosis of {}", indication.name)),
        exclusion_criteria: Some(format!("{}; {}", exclusions[ex1], exclusions[ex2])),
        planned_participants: planned,
        planned_sites,
        status: if rng.uniform() < 0.8 {
            TrialStatus::Completed
        } else {
            TrialStatus::Closed
        },
        actual_enrollment: Some(enrollment),
        duration_months: Some(duration),
    };

    let sites = site_counts
        .iter()
        .zip(&startups)
        .enumerate()
        .filter(|(_, (_, &th))| th < duration)
        .map(|(s, (&n, &th))| {
            derive_site_rate(&trial_id, &format!("{trial_id}-S{s:03}"), n, th, duration)
                .expect("startup precedes trial end")
        })
        .collect();

    let embedding = embed_text(cfg, projection, &serialize_context(&record), rng);
    GeneratedTrial {
        record,
        sites,
        embedding,
        latents: TrialLatents {
            trial_id,
            log_mean,
            deviation,
            noise_sd: en.noise_sd,
            rate,
            startup,
            truncated,
        },
    }
}

/// Month-by-month per-site enrollment until `target` is reached. The final
/// month's overshoot is removed so site counts sum to `target` exactly.
fn simulate_sites(
    n_sites: usize,
    target: u32,
    rate: GammaParams,
    startup: GammaParams,
    cap_months: f64,
    rng: &mut RngState,
) -> (f64, Vec<u32>, Vec<f64>, bool) {
    let mus: Vec<f64> = (0..n_sites).map(|_| rate.sample(rng)).collect();
    let thetas: Vec<f64> = (0..n_sites).map(|_| startup.sample(rng)).collect();
    let mut counts = vec![0u32; n_sites];
    let mut last = vec![0u32; n_sites];
    let mut total = 0u64;
    let max_month = cap_months.floor() as u32;
    let mut month = 0;
    while total < target as u64 && month < max_month {
        month += 1;
        let t = month as f64;
        for s in 0..n_sites {
            let exposure = (t - thetas[s]).clamp(0.0, 1.0);
            let k = if exposure > 0.0 {
                poisson_sample_unchecked(mus[s] * exposure, rng) as u32
            } else {
                0
            };
            last[s] = k;
            counts[s] += k;
            total += k as u64;
        }
    }
    let target64 = target as u64;
    let truncated = total < target64;
    if truncated {
        // Book the shortfall round robin at sites that have started.
        let mut thetas = thetas;
        let end = month as f64;
        let mut started: Vec<usize> = (0..n_sites).filter(|&s| thetas[s] < end).collect();
        if started.is_empty() {
            let first = (0..n_sites).min_by(|&a, &b| thetas[a].total_cmp(&thetas[b])).unwrap_or(0);
            thetas[first] = 0.0;
            started.push(first);
        }
        for i in 0..(target64 - total) as usize {
            counts[started[i % started.len()]] += 1;
        }
        return (end, counts, thetas, true);
    }
    let mut excess = total - target64;
    let mut order: Vec<usize> = (0..n_sites).filter(|&s| last[s] > 0).collect();
    rng.shuffle(&mut order);
    let mut k = 0;
    while excess > 0 {
        let s = order[k % order.len()];
        if last[s] > 0 {
            last[s] -= 1;
            counts[s] -= 1;
            excess -= 1;
        }
        k += 1;
    }
    (month as f64, counts, thetas, false)
}

fn projection_matrix(cfg: &GeneratorConfig) -> Vec<f64> {
    let mut rng = RngState::new(cfg.projection_seed);
    (0..cfg.hash_buckets * cfg.embedding_dim)
        .map(|_| rng.standard_normal())
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Hashed bag of lowercase alphanumeric tokens, unit-normalized.
pub fn token_hash_bag(text: &str, buckets: usize) -> Vec<f64> {
    let mut bag = vec![0.0; buckets];
    for tok in text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
    {
        let tok = tok.to_lowercase();
        bag[(fnv1a(tok.as_bytes()) % buckets as u64) as usize] += 1.0;
    }
    let norm = bag.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        bag.iter_mut().for_each(|v| *v /= norm);
    }
    bag
}

fn embed_text(cfg: &GeneratorConfig, projection: &[f64], text: &str, rng: &mut RngState) -> Vec<f32> {
    let bag = token_hash_bag(text, cfg.hash_buckets);
    let d = cfg.embedding_dim;
    let mut out = vec![0.0f64; d];
    for (b, &c) in bag.iter().enumerate() {
        if c != 0.0 {
            for (o, p) in out.iter_mut().zip(&projection[b * d..(b + 1) * d]) {
                *o += c * p;
            }
        }
    }
    out.iter()
        .map(|&v| (v + cfg.embedding_noise_sd * rng.standard_normal()) as f32)
        .collect()
}
