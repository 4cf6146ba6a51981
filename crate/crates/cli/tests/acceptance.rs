//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --release --test acceptance`; extra arguments select
//! criteria by substring. The process exits 0 so that a failing criterion is
//! reported rather than aborting the workspace test run; the summary line
//! counts failures.

use std::collections::HashMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use enfc_core::dataio::{
    filter_pg_eligible, generate_synthetic, sites_by_trial, split_dataset, DatasetSplit, GeneratorConfig, SplitSizes,
    SynthDataset, TrialRecord,
};
use enfc_core::diffgraph::gradcheck::check_params;
use enfc_core::diffgraph::{init_attention, linear, multi_head_attention, GammaTarget, Graph, Mode, ParamStore, Tensor, Var, LEAKY_SLOPE};
use enfc_core::encoding::{Encoder, TrainingSet};
use enfc_core::evalmetrics::{calibration_sweep, default_significance_grid};
use enfc_core::filterfit::{fit_gamma_gradient, fit_gamma_newton, predict_duration_filterfit, FilterFitConfig, GradientFitConfig};
use enfc_core::models::{forward_model, init_params, train, BackboneConfig, Batch, HeadKind, TargetSet, TrainConfig, TrainData};
use enfc_core::pgsim::{predict_trial_duration, simulate_with_sites};
use enfc_core::randdist::poisson_sample;
use enfc_core::specfun::{digamma, inv_reg_lower_inc_gamma, ln_gamma, reg_lower_inc_gamma};
use enfc_core::{GammaParams, RngState};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

struct Criterion {
    name: &'static str,
    limit: Duration,
    run: fn() -> Verdict,
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria = [
        Criterion { name: "special-functions", limit: Duration::from_secs(5), run: special_functions },
        Criterion { name: "sampler-fidelity", limit: Duration::from_secs(60), run: sampler_fidelity },
        Criterion { name: "autodiff", limit: Duration::from_secs(60), run: autodiff },
        Criterion { name: "first-passage-oracle", limit: Duration::from_secs(120), run: first_passage },
        Criterion { name: "gamma-mle", limit: Duration::from_secs(120), run: gamma_mle },
        Criterion { name: "enrollment-recovery", limit: Duration::from_secs(600), run: enrollment_recovery },
        Criterion { name: "interval-calibration", limit: Duration::from_secs(600), run: interval_calibration },
        Criterion { name: "poisson-gamma-vs-filter-and-fit", limit: Duration::from_secs(1200), run: pg_vs_filterfit },
        Criterion { name: "determinism", limit: Duration::from_secs(600), run: determinism },
    ];
    let (mut passed, mut failed) = (0, 0);
    for c in criteria.iter().filter(|c| filters.is_empty() || filters.iter().any(|f| c.name.contains(f.as_str()))) {
        let t0 = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        let elapsed = t0.elapsed();
        let in_time = elapsed <= c.limit;
        let ok = v.pass && in_time;
        let timing = format!("{:.1}s of {}s", elapsed.as_secs_f64(), c.limit.as_secs());
        let timing = if in_time { timing } else { format!("{timing}, over budget") };
        println!("{} {}: {} [{timing}]", if ok { "PASS" } else { "FAIL" }, c.name, v.detail);
        if ok {
            passed += 1;
        } else {
            failed += 1;
        }
    }
    println!("acceptance: {passed} passed, {failed} failed");
}

// ---------------------------------------------------------------- oracles

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

fn ln_factorial(n: u64) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Stirling series; exact to double precision for x ≥ 100.
fn stirling_ln_gamma(x: f64) -> f64 {
    let x2 = x * x;
    (x - 0.5) * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI).ln() + 1.0 / (12.0 * x) - 1.0 / (360.0 * x * x2)
        + 1.0 / (1260.0 * x * x2 * x2)
        - 1.0 / (1680.0 * x * x2 * x2 * x2)
}

fn erf_series(z: f64) -> f64 {
    let mut term = z;
    let mut sum = z;
    for n in 1..200 {
        term *= -z * z / n as f64;
        let add = term / (2 * n + 1) as f64;
        sum += add;
        if add.abs() < 1e-18 {
            break;
        }
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

/// P(n, x) for integer n: 1 − e^{−x} Σ_{k<n} x^k / k!.
fn p_integer(n: u32, x: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..n {
        term *= x / k as f64;
        sum += term;
    }
    1.0 - (-x).exp() * sum
}

fn bisect(f: impl Fn(f64) -> f64, target: f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

// ------------------------------------------------------- special functions

fn special_functions() -> Verdict {
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut track = |what: &str, err: f64| worst.push((what.to_string(), err));

    let mut e = 0.0f64;
    for n in 1..=60u64 {
        let exact = ln_factorial(n - 1);
        e = e.max((ln_gamma(n as f64).unwrap() - exact).abs() / exact.abs().max(1.0));
        // Γ(n + 1/2) = (2n)! √π / (4^n n!)
        let half = ln_factorial(2 * n) + 0.5 * std::f64::consts::PI.ln() - n as f64 * 4f64.ln() - ln_factorial(n);
        e = e.max((ln_gamma(n as f64 + 0.5).unwrap() - half).abs() / half.abs().max(1.0));
    }
    for x in [120.5, 1e3, 12345.678, 1e6] {
        let exact = stirling_ln_gamma(x);
        e = e.max((ln_gamma(x).unwrap() - exact).abs() / exact.abs());
    }
    track("ln_gamma", e);

    let mut e = 0.0f64;
    let mut harmonic = 0.0;
    for n in 1..=40u32 {
        e = e.max((digamma(n as f64).unwrap() - (harmonic - EULER_GAMMA)).abs());
        harmonic += 1.0 / n as f64;
    }
    let mut odd = 0.0;
    for n in 0..=30u32 {
        let exact = -EULER_GAMMA - 2.0 * 2f64.ln() + 2.0 * odd;
        e = e.max((digamma(n as f64 + 0.5).unwrap() - exact).abs());
        odd += 1.0 / (2 * n + 1) as f64;
    }
    let quarter = -EULER_GAMMA - std::f64::consts::FRAC_PI_2 - 3.0 * 2f64.ln();
    e = e.max((digamma(0.25).unwrap() - quarter).abs());
    track("digamma", e);

    let mut e = 0.0f64;
    for x in [0.01f64, 0.3, 1.0, 2.5, 7.0, 20.0, 60.0] {
        e = e.max((reg_lower_inc_gamma(1.0, x).unwrap() - (1.0 - (-x).exp())).abs());
        for n in [2u32, 5, 17, 40] {
            e = e.max((reg_lower_inc_gamma(n as f64, x).unwrap() - p_integer(n, x)).abs());
        }
    }
    for x in [1e-4, 0.05, 0.5, 1.0, 2.0, 3.5] {
        e = e.max((reg_lower_inc_gamma(0.5, x).unwrap() - erf_series(x.sqrt())).abs());
    }
    track("P(a,x)", e);

    let mut e = 0.0f64;
    for p in [1e-6f64, 0.01, 0.2, 0.5, 0.8, 0.99, 0.999] {
        let x1 = -(1.0 - p).ln();
        e = e.max((inv_reg_lower_inc_gamma(1.0, p).unwrap() - x1).abs() / x1);
        let x2 = bisect(|x| p_integer(5, x), p, 0.0, 100.0);
        e = e.max((inv_reg_lower_inc_gamma(5.0, p).unwrap() - x2).abs() / x2);
        if p <= 0.99 {
            let xh = bisect(|x| erf_series(x.sqrt()), p, 0.0, 8.0);
            e = e.max((inv_reg_lower_inc_gamma(0.5, p).unwrap() - xh).abs() / xh);
        }
    }
    track("inverse", e);

    let mut e = 0.0f64;
    for shape in [0.3, 1.0, 4.5, 50.0] {
        let g = GammaParams::new(shape, 1.7).unwrap();
        for i in 1..1000 {
            let p = i as f64 / 1000.0;
            e = e.max((g.cdf(g.quantile(p).unwrap()) - p).abs());
        }
    }
    let round_trip = e;

    let refs_ok = worst.iter().all(|(_, e)| *e <= 1e-10);
    let detail = worst.iter().map(|(w, e)| format!("{w} {e:.1e}")).collect::<Vec<_>>().join(", ");
    verdict(
        refs_ok && round_trip <= 1e-8,
        format!("max errors {detail} (limit 1e-10); cdf(quantile(p)) {round_trip:.1e} (limit 1e-8)"),
    )
}

// ---------------------------------------------------------------- samplers

const DRAWS: usize = 1_000_000;

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

fn ks_statistic(xs: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

fn sampler_fidelity() -> Verdict {
    // Asymptotic Kolmogorov critical value at significance 0.001.
    let ks_crit = (-(0.001f64 / 2.0).ln() / 2.0).sqrt() / (DRAWS as f64).sqrt();
    let mut ok = true;
    let mut notes = Vec::new();
    for (i, shape) in [0.5, 1.0, 3.0, 20.0].into_iter().enumerate() {
        let g = GammaParams::new(shape, 2.0).unwrap();
        let mut rng = RngState::new(100 + i as u64);
        let mut xs: Vec<f64> = (0..DRAWS).map(|_| g.sample(&mut rng)).collect();
        let (m, v) = moments(&xs);
        let (em, ev) = ((m / g.mean() - 1.0).abs(), (v / g.variance() - 1.0).abs());
        let d = ks_statistic(&mut xs, |x| g.cdf(x));
        ok &= em <= 0.01 && ev <= 0.02 && d <= ks_crit;
        notes.push(format!("Gamma({shape}) mean {em:.1e} var {ev:.1e} D {d:.1e}"));
    }
    for (i, rate) in [0.7, 4.0, 9.9, 10.5, 45.0, 300.0].into_iter().enumerate() {
        let mut rng = RngState::new(200 + i as u64);
        let xs: Vec<f64> = (0..DRAWS).map(|_| poisson_sample(rate, &mut rng).unwrap() as f64).collect();
        let (m, v) = moments(&xs);
        let (em, ev) = ((m / rate - 1.0).abs(), (v / rate - 1.0).abs());
        ok &= em <= 0.01 && ev <= 0.02;
        notes.push(format!("Poisson({rate}) mean {em:.1e} var {ev:.1e}"));
    }
    verdict(
        ok,
        format!("{DRAWS} draws each, limits mean 1%, var 2%, KS D {ks_crit:.1e}; {}", notes.join("; ")),
    )
}

// ---------------------------------------------------------------- autodiff

fn rand_tensor(shape: &[usize], rng: &mut RngState, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.standard_normal() * scale).collect()).unwrap()
}

fn grad_error(store: &ParamStore, build: &dyn Fn(&mut Graph, &ParamStore) -> enfc_core::Result<Var>) -> f64 {
    let mut g = Graph::new(Mode::Train, 17);
    let loss = build(&mut g, store).unwrap();
    let analytic = g.backward(loss).unwrap().into_param_map();
    let report = check_params(store, &analytic, 1e-6, None, |s| {
        let mut g = Graph::new(Mode::Train, 17);
        let l = build(&mut g, s)?;
        Ok(g.value(l).item())
    })
    .unwrap();
    assert_eq!(report.checked, store.num_scalars());
    report.max_rel_error
}

type OpCase = (&'static str, Box<dyn Fn(&mut Graph, &ParamStore) -> enfc_core::Result<Var>>);

fn op_cases() -> Vec<OpCase> {
    let counts = [3.0, 40.0, 120.0];
    let singles: Vec<GammaTarget> = [0.7, 2.5, 1.2].iter().map(|&x| GammaTarget::single(x).unwrap()).collect();
    let pooled: Vec<GammaTarget> = (0..3)
        .map(|i| GammaTarget::from_samples(&[0.4 + i as f64, 1.3, 2.2]).unwrap())
        .collect();
    // Reduce a [rows, cols] output to a scalar through a fixed projection
    // and a nonlinearity, so that symmetric gradients cannot hide errors.
    fn weighted(g: &mut Graph, x: Var) -> enfc_core::Result<Var> {
        let cols = g.value(x).shape()[1];
        let w = Tensor::new(vec![cols, 1], (0..cols).map(|i| 0.3 - 0.17 * i as f64).collect())?;
        let w = g.input(w);
        let m = g.matmul(x, w)?;
        let m = g.scale(m, 0.3);
        let e = g.exp(m);
        Ok(g.sum(e))
    }
    vec![
        ("matmul", Box::new(|g, s| {
            let (x, y) = (g.param_from(s, "x")?, g.param_from(s, "w")?);
            let m = g.matmul(x, y)?;
            weighted(g, m)
        })),
        ("add_bias", Box::new(|g, s| {
            let (x, b) = (g.param_from(s, "x")?, g.param_from(s, "b")?);
            let m = g.add_bias(x, b)?;
            weighted(g, m)
        })),
        ("add", Box::new(|g, s| {
            let (x, y) = (g.param_from(s, "x")?, g.param_from(s, "y")?);
            let m = g.add(x, y)?;
            weighted(g, m)
        })),
        ("scale", Box::new(|g, s| {
            let x = g.param_from(s, "x")?;
            let m = g.scale(x, -1.7);
            weighted(g, m)
        })),
        ("leaky_relu", Box::new(|g, s| {
            let x = g.param_from(s, "x")?;
            let m = g.leaky_relu(x, LEAKY_SLOPE);
            weighted(g, m)
        })),
        ("dropout", Box::new(|g, s| {
            let x = g.param_from(s, "x")?;
            let m = g.dropout(x, 0.3)?;
            weighted(g, m)
        })),
        ("exp", Box::new(|g, s| {
            let x = g.param_from(s, "x")?;
            let m = g.exp(x);
            weighted(g, m)
        })),
        ("layer_norm", Box::new(|g, s| {
            let (x, gain, b) = (g.param_from(s, "x")?, g.param_from(s, "gain")?, g.param_from(s, "b")?);
            let m = g.layer_norm(x, gain, b)?;
            weighted(g, m)
        })),
        ("stack+attention", Box::new(|g, s| {
            let (x, y) = (g.param_from(s, "x")?, g.param_from(s, "y")?);
            let m = multi_head_attention(g, s, "att", x, &[x, y], 2)?;
            weighted(g, m)
        })),
        ("sum+mean", Box::new(|g, s| {
            let x = g.param_from(s, "x")?;
            let e = g.exp(x);
            let a = g.sum(e);
            let b = g.mean(e);
            let b = g.scale(b, 3.0);
            g.add(a, b)
        })),
        ("l1_log_loss", Box::new(move |g, s| {
            let h = g.param_from(s, "h")?;
            let c = g.column(h, 0)?;
            g.l1_log_loss(c, &counts)
        })),
        ("gamma_nll", Box::new(move |g, s| {
            let h = g.param_from(s, "h")?;
            let (a, b) = (g.column(h, 0)?, g.column(h, 1)?);
            let l1 = g.gamma_nll(a, b, &singles)?;
            let l2 = g.gamma_nll(b, a, &pooled)?;
            g.add(l1, l2)
        })),
        ("linear", Box::new(|g, s| {
            let x = g.param_from(s, "x")?;
            let m = linear(g, s, "lin", x)?;
            weighted(g, m)
        })),
    ]
}

fn model_loss(g: &mut Graph, p: &ParamStore, cfg: &BackboneConfig, head: HeadKind, batch: &Batch) -> enfc_core::Result<Var> {
    let out = forward_model(g, p, cfg, batch)?;
    let b = g.value(out).shape()[0];
    match head {
        HeadKind::Deterministic => {
            let c = g.column(out, 0)?;
            let y: Vec<f64> = (0..b).map(|i| 3.0 + 40.0 * i as f64).collect();
            g.l1_log_loss(c, &y)
        }
        HeadKind::Gamma => {
            let (s, r) = (g.column(out, 0)?, g.column(out, 1)?);
            let t: Vec<GammaTarget> = (0..b).map(|i| GammaTarget::single(1.0 + 0.7 * i as f64).unwrap()).collect();
            g.gamma_nll(s, r, &t)
        }
        HeadKind::PoissonGamma => {
            let c: Vec<Var> = (0..4).map(|j| g.column(out, j)).collect::<enfc_core::Result<_>>()?;
            let rates: Vec<GammaTarget> = (0..b)
                .map(|i| GammaTarget::from_samples(&[0.5 + i as f64, 2.0, 0.3]).unwrap())
                .collect();
            let starts: Vec<GammaTarget> = (0..b).map(|i| GammaTarget::single(1.0 + 0.1 * i as f64).unwrap()).collect();
            let a = g.gamma_nll(c[0], c[1], &rates)?;
            let s = g.gamma_nll(c[2], c[3], &starts)?;
            g.add(a, s)
        }
    }
}

fn autodiff() -> Verdict {
    const TOL: f64 = 1e-4;
    let mut rng = RngState::new(8);
    let mut store = ParamStore::new();
    store.insert("x", rand_tensor(&[3, 8], &mut rng, 1.0));
    store.insert("y", rand_tensor(&[3, 8], &mut rng, 1.0));
    store.insert("w", rand_tensor(&[8, 5], &mut rng, 0.5));
    store.insert("b", rand_tensor(&[8], &mut rng, 0.5));
    store.insert("gain", rand_tensor(&[8], &mut rng, 1.0));
    store.insert("h", rand_tensor(&[3, 2], &mut rng, 0.7));
    init_attention(&mut store, "att", 8, &mut rng);
    store.init_linear("lin", 8, 3, &mut rng);

    let mut ok = true;
    let mut notes = Vec::new();
    let mut op_worst = (0.0f64, "");
    for (name, build) in op_cases() {
        let err = grad_error(&store, build.as_ref());
        ok &= err <= TOL;
        if err >= op_worst.0 {
            op_worst = (err, name);
        }
    }
    notes.push(format!("13 ops, worst {} {:.1e}", op_worst.1, op_worst.0));

    let cfg = BackboneConfig { hidden: 8, heads: 2, ..BackboneConfig::new(3, 4, 2) };
    let mut rng = RngState::new(12);
    let trials: Vec<_> = (0..5)
        .map(|_| enfc_core::encoding::EncodedTrial {
            x_emb: (0..3).map(|_| rng.standard_normal()).collect(),
            x_cat: (0..4).map(|_| (rng.uniform() < 0.5) as u8 as f64).collect(),
            x_num: (0..2).map(|_| rng.standard_normal()).collect(),
        })
        .collect();
    let refs: Vec<_> = trials.iter().collect();
    let batch = Batch::from_encoded(&refs, &cfg).unwrap();
    for head in [HeadKind::Deterministic, HeadKind::Gamma, HeadKind::PoissonGamma] {
        let mut rng = RngState::new(13);
        let mut p = init_params(&cfg, head, &mut rng).unwrap();
        for (name, t) in p.iter_mut() {
            let scale = if name.starts_with("head.out") { 0.1 } else { 0.3 };
            t.data_mut().iter_mut().for_each(|v| *v += scale * rng.standard_normal());
        }
        let err = grad_error(&p, &|g, s| model_loss(g, s, &cfg, head, &batch));
        ok &= err <= TOL;
        notes.push(format!("{} model {err:.1e} over {} weights", head.name(), p.num_scalars()));
    }
    verdict(ok, format!("central differences, limit {TOL:.0e}; {}", notes.join(", ")))
}

// ------------------------------------------------------------ first passage

/// Mean of min(T, cap) for one always-open site with monthly rate `mu`,
/// where T is the first month the count reaches `target`: the distribution
/// of counts still below the target is carried forward month by month.
fn dp_mean_duration(mu: f64, target: usize, cap: usize) -> f64 {
    let pmf: Vec<f64> = (0..target)
        .map(|k| (k as f64 * mu.ln() - mu - ln_factorial(k as u64)).exp())
        .collect();
    let mut below = vec![0.0; target];
    below[0] = 1.0;
    let mut survival_sum = 0.0;
    for _ in 0..cap {
        survival_sum += below.iter().sum::<f64>();
        let mut next = vec![0.0; target];
        for (c, &mass) in below.iter().enumerate().filter(|(_, m)| **m > 0.0) {
            for j in c..target {
                next[j] += mass * pmf[j - c];
            }
        }
        below = next;
    }
    survival_sum
}

/// The same quantity in closed form: P(T > t) = P(Poisson(μt) < target).
fn closed_form_mean_duration(mu: f64, target: u32, cap: usize) -> f64 {
    (0..cap).map(|t| 1.0 - p_poisson_at_least(mu * t as f64, target)).sum()
}

fn p_poisson_at_least(m: f64, k: u32) -> f64 {
    if m == 0.0 {
        return 0.0;
    }
    // P(N < k) = Σ_{j<k} e^{-m} m^j / j!
    let below: f64 = (0..k).map(|j| (j as f64 * m.ln() - m - ln_factorial(j as u64)).exp()).sum();
    1.0 - below
}

fn first_passage() -> Verdict {
    const REPS: u64 = 100_000;
    const CAP: f64 = 400.0;
    let mut ok = true;
    let mut notes = Vec::new();
    for (i, (mu, target)) in [(2.0, 5u32), (0.5, 12), (6.0, 150)].into_iter().enumerate() {
        let dp = dp_mean_duration(mu, target as usize, CAP as usize);
        let cf = closed_form_mean_duration(mu, target, CAP as usize);
        assert!((dp - cf).abs() < 1e-9 * cf, "oracles disagree: {dp} vs {cf}");
        let root = RngState::new(40 + i as u64);
        let sum: f64 = (0..REPS)
            .map(|r| {
                simulate_with_sites(&[mu], &[0.0], target as u64, 1.0, CAP, &mut root.split(r), false)
                    .unwrap()
                    .duration_months
            })
            .sum();
        let mean = sum / REPS as f64;
        let rel = (mean / dp - 1.0).abs();
        ok &= rel <= 0.01;
        notes.push(format!("mu {mu} target {target}: sim {mean:.4} exact {dp:.4} ({rel:.1e})"));
    }
    verdict(ok, format!("{REPS} replications, limit 1%; {}", notes.join("; ")))
}

// --------------------------------------------------------------- gamma MLE

fn gamma_mle() -> Verdict {
    let mut ok = true;
    let mut notes = Vec::new();
    for (label, truth, seed) in [("Exp(1)", (1.0, 1.0), 61u64), ("Gamma(5,2)", (5.0, 2.0), 62)] {
        let g = GammaParams::new(truth.0, truth.1).unwrap();
        let mut rng = RngState::new(seed);
        let xs: Vec<f64> = (0..10_000).map(|_| g.sample(&mut rng)).collect();
        let newton = fit_gamma_newton(&xs).unwrap();
        let grad = fit_gamma_gradient(&xs, &GradientFitConfig { seed, ..GradientFitConfig::default() }).unwrap();
        let agree = (grad.shape / newton.shape - 1.0).abs().max((grad.rate / newton.rate - 1.0).abs());
        let recover = |p: GammaParams| (p.shape / truth.0 - 1.0).abs().max((p.rate / truth.1 - 1.0).abs());
        let (rn, rg) = (recover(newton), recover(grad));
        ok &= agree <= 1e-3 && rn <= 0.05 && rg <= 0.05;
        notes.push(format!(
            "{label}: agreement {agree:.1e}, recovery newton {rn:.3} gradient {rg:.3}"
        ));
    }
    verdict(ok, format!("10000 samples, limits 1e-3 and 5%; {}", notes.join("; ")))
}

// ------------------------------------------------------- enrollment models

struct StudyFixture {
    data: SynthDataset,
    split: DatasetSplit,
    encoder: Encoder,
    noise_sd: f64,
}

fn study_fixture() -> StudyFixture {
    let config = GeneratorConfig::builtin();
    let data = generate_synthetic(&config, 6000, 11).unwrap();
    let split = split_dataset(&data.trials, SplitSizes { train: 5000, dev: 500, test: 500 }, 11).unwrap();
    let encoder = Encoder::fit(TrainingSet::new(&split.train), data.embeddings.dim()).unwrap();
    StudyFixture { data, split, encoder, noise_sd: config.enrollment.noise_sd }
}

impl StudyFixture {
    fn data(&self, records: &[TrialRecord]) -> TrainData {
        TrainData::enrollment(self.encoder.encode_all(records, &self.data.embeddings).unwrap(), records).unwrap()
    }

    fn train(&self, head: HeadKind, seed: u64) -> (enfc_core::models::ModelCheckpoint, TrainData) {
        let (tr, dv, te) = (self.data(&self.split.train), self.data(&self.split.dev), self.data(&self.split.test));
        let backbone = BackboneConfig::for_encoder(&self.encoder);
        let (ckpt, _) = train(head, self.encoder.clone(), backbone, &TrainConfig::study(seed), &tr, &dv).unwrap();
        (ckpt, te)
    }
}

fn truth(data: &TrainData) -> &[f64] {
    match &data.targets {
        TargetSet::Enrollment(y) => y,
        TargetSet::Sites(_) => unreachable!("enrollment targets"),
    }
}

/// E|e^Z − 1| for Z ~ N(0, s²), by Simpson's rule. The best absolute-error
/// forecast of enrollment + 1 = e^{m+Z} is the median e^m, so this times e^m
/// is the irreducible error of one trial.
fn noise_floor_factor(s: f64) -> f64 {
    let n = 20_000;
    let (a, b) = (-12.0 * s, 12.0 * s);
    let h = (b - a) / n as f64;
    let f = |z: f64| (z.exp() - 1.0).abs() * (-0.5 * (z / s).powi(2)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
    let mut acc = f(a) + f(b);
    for i in 1..n {
        acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

fn enrollment_recovery() -> Verdict {
    let fx = study_fixture();
    let (ckpt, test) = fx.train(HeadKind::Deterministic, 1);
    let y = truth(&test);
    let pred = ckpt.predict_point_many(&test.inputs).unwrap();
    let n = y.len() as f64;
    let mae = pred.iter().zip(y).map(|(p, y)| (p - y).abs()).sum::<f64>() / n;
    let latents: HashMap<_, _> = fx.data.latents.iter().map(|l| (l.trial_id.as_str(), l.log_mean)).collect();
    let factor = noise_floor_factor(fx.noise_sd);
    let floor = fx.split.test.iter().map(|t| latents[t.trial_id.as_str()].exp() * factor).sum::<f64>() / n;
    let naive = fx
        .split
        .test
        .iter()
        .zip(y)
        .map(|(t, y)| (t.planned_participants as f64 - y).abs())
        .sum::<f64>()
        / n;
    let (ratio, gain) = (mae / floor, 1.0 - mae / naive);
    verdict(
        ratio <= 1.15 && gain >= 0.30,
        format!(
            "test MAE {mae:.2}, noise floor {floor:.2} (ratio {ratio:.3}, limit 1.15), naive MAE {naive:.2} (improvement {:.1}%, limit 30%)",
            100.0 * gain
        ),
    )
}

fn interval_calibration() -> Verdict {
    let fx = study_fixture();
    let (ckpt, test) = fx.train(HeadKind::Gamma, 1);
    let y = truth(&test);
    let intervals = ckpt.predict_interval_many(&test.inputs, 0.1).unwrap();
    let coverage = intervals.iter().zip(y).filter(|(iv, y)| iv.contains(**y)).count() as f64 / y.len() as f64;
    let rows = calibration_sweep(&ckpt, &test.inputs, y, &default_significance_grid()).unwrap();
    let mut by_level = rows.clone();
    by_level.sort_by(|a, b| a.level.total_cmp(&b.level));
    let monotone = by_level
        .windows(2)
        .all(|w| w[1].accuracy >= w[0].accuracy && w[1].median_width >= w[0].median_width);
    verdict(
        (0.85..=0.95).contains(&coverage) && monotone,
        format!(
            "90% coverage {:.1}% (limits 85-95%), sweep over {} levels monotone: {monotone} (accuracy {:.2}..{:.2})",
            100.0 * coverage,
            rows.len(),
            by_level[0].accuracy,
            by_level[by_level.len() - 1].accuracy
        ),
    )
}

// ---------------------------------------------- Poisson-Gamma vs filter-fit

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn pg_vs_filterfit() -> Verdict {
    const REPS: usize = 1024;
    let data = generate_synthetic(&GeneratorConfig::poisson_gamma(), 2500, 5).unwrap();
    let eligible = filter_pg_eligible(&data.trials);
    let m = eligible.len();
    let min_sites = eligible.iter().map(|t| t.planned_sites).min().unwrap_or(0);
    let split = split_dataset(&eligible, SplitSizes { train: m - m / 5 - m / 10, dev: m / 10, test: m / 5 }, 5).unwrap();
    let encoder = Encoder::fit(TrainingSet::new(&split.train), data.embeddings.dim()).unwrap();
    let sites = |r: &[TrialRecord]| TrainData::sites(encoder.encode_all(r, &data.embeddings).unwrap(), r, &data.sites).unwrap();
    let (ckpt, _) = train(
        HeadKind::PoissonGamma,
        encoder.clone(),
        BackboneConfig::for_encoder(&encoder),
        &TrainConfig::poisson_gamma(1),
        &sites(&split.train),
        &sites(&split.dev),
    )
    .unwrap();

    let by_trial = sites_by_trial(&data.sites);
    let ff_base = FilterFitConfig { replications: REPS, ..FilterFitConfig::default() };
    let (mut err_pg, mut err_ff) = (Vec::new(), Vec::new());
    let (mut t_pg, mut t_ff, mut t_forward) = (Duration::ZERO, Duration::ZERO, Duration::ZERO);
    let mut skipped = 0;
    for (i, q) in split.test.iter().enumerate() {
        let seed = i as u64;
        let t = Instant::now();
        let ff = predict_duration_filterfit(q, &split.train, &by_trial, &FilterFitConfig { seed, ..ff_base.clone() });
        let elapsed_ff = t.elapsed();
        let Ok(ff) = ff else {
            skipped += 1;
            continue;
        };
        t_ff += elapsed_ff;

        let t = Instant::now();
        let pg = predict_trial_duration(&ckpt, q, &data.embeddings, REPS, 72.0, seed).unwrap();
        t_pg += t.elapsed();

        let t = Instant::now();
        let (x, _) = ckpt.encoder.encode(q, &data.embeddings).unwrap();
        std::hint::black_box(ckpt.predict_site_params(&x).unwrap());
        t_forward += t.elapsed();

        let y = q.duration_months.unwrap();
        err_pg.push((pg.summary.quantiles.p50 - y).abs());
        err_ff.push((ff.record.summary.quantiles.p50 - y).abs());
    }
    let k = err_pg.len();
    let per = |d: Duration| d.as_secs_f64() * 1e3 / k as f64;
    let (medae_pg, medae_ff) = (median(err_pg), median(err_ff));
    let ratio = t_ff.as_secs_f64() / t_pg.as_secs_f64();
    let forward_ratio = t_ff.as_secs_f64() / t_forward.as_secs_f64();
    verdict(
        m >= 500 && min_sites > 10 && medae_pg <= medae_ff && ratio >= 10.0,
        format!(
            "{m} eligible trials (min {min_sites} sites), {k} test trials with enough similar sites ({skipped} skipped); \
             MedAE learned {medae_pg:.2} vs filter-and-fit {medae_ff:.2} months; per trial learned {:.2} ms \
             (forward + {REPS} replications) vs filter-and-fit {:.2} ms (fit + {REPS} replications): speedup {ratio:.1}x, limit 10x \
             [forward pass alone {:.3} ms, {forward_ratio:.0}x]",
            per(t_pg),
            per(t_ff),
            per(t_forward)
        ),
    )
}

// ------------------------------------------------------------- determinism

fn enfc(args: &[&str], cwd: &Path, threads: &str) {
    let out = Command::new(env!("CARGO_BIN_EXE_enfc"))
        .args(args)
        .current_dir(cwd)
        .env("ENFC_LOG", "error")
        .env("RAYON_NUM_THREADS", threads)
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn every_command(root: &Path, threads: &str) {
    let run = |args: &[&str]| enfc(args, root, threads);
    run(&["datagen", "--trials", "400", "--seed", "7", "--out", "data"]);
    run(&["encode", "--in", "data", "--seed", "7", "--out", "enc"]);
    for model in ["deterministic", "stochastic"] {
        let m = format!("m-{model}");
        run(&["train", "--in", "data", "--split", "enc/split.json", "--model", model, "--max-epochs", "4", "--seed", "7", "--out", &m]);
        let ckpt = format!("{m}/model.enfc");
        let split = format!("{m}/split.json");
        run(&["predict", "--in", "data", "--checkpoint", &ckpt, "--split", &split, "--out", &format!("p-{model}")]);
        run(&["evaluate", "--in", "data", "--predictions", &format!("p-{model}/predictions.jsonl"), "--out", &format!("e-{model}")]);
    }
    let base = ["--in", "data", "--checkpoint", "m-stochastic/model.enfc", "--split", "m-stochastic/split.json"];
    run(&[&["interval"][..], &base, &["--out", "iv"]].concat());
    run(&[&["calibrate"][..], &base, &["--out", "cal"]].concat());

    run(&["datagen", "--trials", "500", "--profile", "poisson-gamma", "--seed", "3", "--out", "pg"]);
    run(&["train", "--in", "pg", "--model", "poisson-gamma", "--max-epochs", "3", "--seed", "3", "--out", "m-pg"]);
    run(&["simulate", "--in", "pg", "--checkpoint", "m-pg/model.enfc", "--split", "m-pg/split.json", "--replications", "256", "--seed", "3", "--out", "sim"]);
    run(&["fit-baseline", "--in", "pg", "--split", "m-pg/split.json", "--replications", "256", "--min-samples", "10", "--seed", "3", "--out", "ff"]);
    run(&["evaluate", "--in", "pg", "--predictions", "sim/simulations.jsonl", "--out", "e-sim"]);
    run(&["evaluate", "--in", "pg", "--predictions", "ff/simulations.jsonl", "--out", "e-ff"]);
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Verdict {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    every_command(a.path(), "1");
    every_command(b.path(), "4");
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let names: Vec<&str> = ta.iter().map(|(n, _)| n.as_str()).collect();
    let same_names = names == tb.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>();
    let differing: Vec<&str> = ta
        .iter()
        .zip(&tb)
        .filter(|((_, x), (_, y))| x != y)
        .map(|((n, _), _)| n.as_str())
        .collect();
    let bytes: usize = ta.iter().map(|(_, d)| d.len()).sum();
    verdict(
        same_names && differing.is_empty(),
        format!(
            "all nine commands run twice (1 and 4 worker threads): {} files, {bytes} bytes, {} differ{}",
            ta.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(": {}", differing.join(", ")) }
        ),
    )
}
