//! Gamma and Poisson distributions plus the seedable generator every
//! stochastic component draws from.

use rand::{Rng, RngCore, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::specfun::{inc_gamma_pair, inv_reg_lower_inc_gamma, ln_gamma_unchecked};

/// Seeded xoshiro256++ stream.
///
/// `split` derives child streams from the seed alone, so the child for a
/// given index is the same no matter how much the parent has been used.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    inner: Xoshiro256PlusPlus,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream number `stream`.
    pub fn split(&self, stream: u64) -> RngState {
        RngState::new(splitmix64(self.seed ^ splitmix64(stream.wrapping_add(1))))
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform_open(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = (self.inner.next_u64() % (i as u64 + 1)) as usize;
            items.swap(i, j);
        }
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        (self.inner.next_u64() % n as u64) as usize
    }
}

impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Shape/rate parameterization of the Gamma distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaParams {
    pub shape: f64,
    pub rate: f64,
}

impl GammaParams {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape > 0.0 && shape.is_finite()) || !(rate > 0.0 && rate.is_finite()) {
            return Err(domain(format!(
                "gamma parameters must be positive and finite, got shape={shape} rate={rate}"
            )));
        }
        Ok(Self { shape, rate })
    }

    /// From unconstrained logits: shape = exp(a), rate = exp(b).
    pub fn from_logits(shape_logit: f64, rate_logit: f64) -> Result<Self> {
        Self::new(shape_logit.exp(), rate_logit.exp())
    }

    /// Moment matching: shape = mean²/var, rate = mean/var.
    pub fn from_moments(mean: f64, variance: f64) -> Result<Self> {
        Self::new(mean * mean / variance, mean / variance)
    }

    /// Closed-form approximation to the maximum-likelihood fit from the
    /// sample mean and the mean of the logs.
    pub fn approx_mle(mean: f64, mean_ln: f64) -> Result<Self> {
        let s = mean.ln() - mean_ln;
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::DegenerateData(format!(
                "log-mean gap {s} must be positive for a gamma fit"
            )));
        }
        let shape = (3.0 - s + ((s - 3.0).powi(2) + 24.0 * s).sqrt()) / (12.0 * s);
        Self::new(shape, shape / mean)
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    pub fn variance(&self) -> f64 {
        self.shape / (self.rate * self.rate)
    }

    pub fn log_pdf(&self, x: f64) -> Result<f64> {
        if !(x > 0.0) || !x.is_finite() {
            return Err(domain(format!("gamma density requires x > 0, got {x}")));
        }
        Ok(self.log_pdf_unchecked(x))
    }

    pub(crate) fn log_pdf_unchecked(&self, x: f64) -> f64 {
        let (a, l) = (self.shape, self.rate);
        a * l.ln() - ln_gamma_unchecked(a) + (a - 1.0) * x.ln() - l * x
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        inc_gamma_pair(self.shape, self.rate * x).0
    }

    pub fn quantile(&self, p: f64) -> Result<f64> {
        Ok(inv_reg_lower_inc_gamma(self.shape, p)? / self.rate)
    }

    /// Marsaglia–Tsang squeeze; shapes below one are boosted through
    /// Gamma(a+1)·U^(1/a).
    pub fn sample(&self, rng: &mut RngState) -> f64 {
        if self.shape < 1.0 {
            let g = standard_gamma_ge1(self.shape + 1.0, rng);
            let log_x = g.ln() + rng.uniform_open().ln() / self.shape;
            return (log_x.exp() / self.rate).max(f64::MIN_POSITIVE);
        }
        standard_gamma_ge1(self.shape, rng) / self.rate
    }
}

fn standard_gamma_ge1(shape: f64, rng: &mut RngState) -> f64 {
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = rng.standard_normal();
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u = rng.uniform_open();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 {
            return d * v;
        }
        if u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

pub fn gamma_log_pdf(params: GammaParams, x: f64) -> Result<f64> {
    params.log_pdf(x)
}

pub fn gamma_sample(params: GammaParams, rng: &mut RngState) -> f64 {
    params.sample(rng)
}

pub fn gamma_quantile(params: GammaParams, p: f64) -> Result<f64> {
    params.quantile(p)
}

const POISSON_INVERSION_LIMIT: f64 = 10.0;

/// Poisson draw: sequential-search inversion below rate 10, Hörmann's
/// transformed rejection (PTRS) above.
pub fn poisson_sample(rate: f64, rng: &mut RngState) -> Result<u64> {
    if !(rate >= 0.0) || !rate.is_finite() {
        return Err(domain(format!("poisson rate must be finite and >= 0, got {rate}")));
    }
    Ok(poisson_sample_unchecked(rate, rng))
}

pub(crate) fn poisson_sample_unchecked(rate: f64, rng: &mut RngState) -> u64 {
    if rate == 0.0 {
        return 0;
    }
    if rate < POISSON_INVERSION_LIMIT {
        let u = rng.uniform();
        let mut p = (-rate).exp();
        let mut cdf = p;
        let mut k = 0u64;
        while u > cdf {
            k += 1;
            p *= rate / k as f64;
            cdf += p;
            if p == 0.0 && k as f64 > rate {
                break;
            }
        }
        return k;
    }
    let slam = rate.sqrt();
    let loglam = rate.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u = rng.uniform() - 0.5;
        let v = rng.uniform_open();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + rate + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        if v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln()
            <= -rate + k * loglam - ln_gamma_unchecked(k + 1.0)
        {
            return k as u64;
        }
    }
}
