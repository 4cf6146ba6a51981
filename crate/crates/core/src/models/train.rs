use std::collections::HashMap;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{
    eval_outputs, forward_model, init_params, patients_from_log, BackboneConfig, Batch, HeadKind, ModelCheckpoint,
    TrainConfig, TrainingMeta,
};
use crate::dataio::{SiteOutcome, TrialRecord};
use crate::diffgraph::{GammaTarget, Graph, Mode, OptimizerState, ParamStore, Var};
use crate::encoding::{EncodedTrial, Encoder};
use crate::error::{structural, Error, Result};
use crate::randdist::{GammaParams, RngState};
use crate::specfun::ln_gamma_unchecked;

/// Shift keeping zero rates and startup times inside the Gamma support.
pub const SITE_TARGET_SHIFT: f64 = 1e-6;

/// Scale applied to the output layer's initial weights so training starts
/// near the marginal fit encoded in its bias.
const OUTPUT_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub enum TargetSet {
    /// Realized enrollment per trial.
    Enrollment(Vec<f64>),
    /// Per-trial sufficient statistics of the site-level enrollment rates
    /// and startup times.
    Sites(Vec<(GammaTarget, GammaTarget)>),
}

impl TargetSet {
    fn len(&self) -> usize {
        match self {
            TargetSet::Enrollment(v) => v.len(),
            TargetSet::Sites(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainData {
    pub inputs: Vec<EncodedTrial>,
    pub targets: TargetSet,
}

impl TrainData {
    pub fn enrollment(inputs: Vec<EncodedTrial>, trials: &[TrialRecord]) -> Result<Self> {
        if inputs.len() != trials.len() {
            return Err(structural("inputs and trials differ in length"));
        }
        let y = trials
            .iter()
            .map(|t| {
                t.actual_enrollment
                    .map(f64::from)
                    .ok_or_else(|| Error::Data(format!("trial {} has no actual enrollment", t.trial_id)))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            inputs,
            targets: TargetSet::Enrollment(y),
        })
    }

    /// Site-level targets. Trials without any contributing site are dropped
    /// with a warning.
    pub fn sites(inputs: Vec<EncodedTrial>, trials: &[TrialRecord], sites: &[SiteOutcome]) -> Result<Self> {
        if inputs.len() != trials.len() {
            return Err(structural("inputs and trials differ in length"));
        }
        let mut by_trial: HashMap<&str, (Vec<f64>, Vec<f64>)> = HashMap::new();
        for s in sites {
            let e = by_trial.entry(s.trial_id.as_str()).or_default();
            e.0.push(s.rate + SITE_TARGET_SHIFT);
            e.1.push(s.startup_months + SITE_TARGET_SHIFT);
        }
        let mut kept_inputs = Vec::with_capacity(inputs.len());
        let mut targets = Vec::with_capacity(inputs.len());
        let mut dropped = 0;
        for (x, t) in inputs.into_iter().zip(trials) {
            match by_trial.get(t.trial_id.as_str()) {
                Some((rates, startups)) => {
                    kept_inputs.push(x);
                    targets.push((GammaTarget::from_samples(rates)?, GammaTarget::from_samples(startups)?));
                }
                None => dropped += 1,
            }
        }
        if dropped > 0 {
            log::warn!("{dropped} trial(s) without site outcomes left out of site-level training");
        }
        Ok(Self {
            inputs: kept_inputs,
            targets: TargetSet::Sites(targets),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Eval-mode training loss of the initial weights.
    pub initial_train_loss: f64,
    /// Eval-mode training loss of the returned weights.
    pub final_train_loss: f64,
    pub epochs: Vec<EpochLog>,
}

fn check_targets(head: HeadKind, data: &TrainData, which: &str) -> Result<()> {
    if data.is_empty() {
        return Err(structural(format!("{which} split is empty")));
    }
    if data.targets.len() != data.inputs.len() {
        return Err(structural(format!("{which} split has mismatched inputs and targets")));
    }
    let ok = matches!(
        (head, &data.targets),
        (HeadKind::Deterministic | HeadKind::Gamma, TargetSet::Enrollment(_)) | (HeadKind::PoissonGamma, TargetSet::Sites(_))
    );
    if !ok {
        return Err(Error::Usage(format!("{which} targets do not fit a {} model", head.name())));
    }
    Ok(())
}

/// Training loss of one batch, built on the graph.
fn batch_loss(g: &mut Graph, out: Var, head: HeadKind, targets: &TargetSet, idx: &[usize]) -> Result<Var> {
    match (head, targets) {
        (HeadKind::Deterministic, TargetSet::Enrollment(y)) => {
            let pred = g.column(out, 0)?;
            let counts: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            g.l1_log_loss(pred, &counts)
        }
        (HeadKind::Gamma, TargetSet::Enrollment(y)) => {
            let shape = g.column(out, 0)?;
            let rate = g.column(out, 1)?;
            let t = idx
                .iter()
                .map(|&i| GammaTarget::single(y[i].ln_1p()))
                .collect::<Result<Vec<_>>>()?;
            g.gamma_nll(shape, rate, &t)
        }
        (HeadKind::PoissonGamma, TargetSet::Sites(s)) => {
            let cols = (0..4).map(|j| g.column(out, j)).collect::<Result<Vec<_>>>()?;
            let rates: Vec<GammaTarget> = idx.iter().map(|&i| s[i].0).collect();
            let startups: Vec<GammaTarget> = idx.iter().map(|&i| s[i].1).collect();
            let l_rate = g.gamma_nll(cols[0], cols[1], &rates)?;
            let l_start = g.gamma_nll(cols[2], cols[3], &startups)?;
            g.add(l_rate, l_start)
        }
        _ => Err(structural("targets do not match the head")),
    }
}

fn nll(logit_shape: f64, logit_rate: f64, t: &GammaTarget) -> f64 {
    let a = logit_shape.exp();
    -(a * logit_rate - ln_gamma_unchecked(a) + (a - 1.0) * t.mean_ln - logit_rate.exp() * t.mean)
}

/// Eval-mode training objective over a whole split.
fn eval_loss(outputs: &[Vec<f64>], head: HeadKind, targets: &TargetSet) -> f64 {
    let n = outputs.len() as f64;
    let total: f64 = match (head, targets) {
        (HeadKind::Deterministic, TargetSet::Enrollment(y)) => {
            outputs.iter().zip(y).map(|(o, y)| (y.ln_1p() - o[0]).abs()).sum()
        }
        (HeadKind::Gamma, TargetSet::Enrollment(y)) => outputs
            .iter()
            .zip(y)
            .map(|(o, y)| {
                let t = y.ln_1p();
                nll(o[0], o[1], &GammaTarget { mean_ln: t.ln(), mean: t })
            })
            .sum(),
        (HeadKind::PoissonGamma, TargetSet::Sites(s)) => outputs
            .iter()
            .zip(s)
            .map(|(o, (r, st))| nll(o[0], o[1], r) + nll(o[2], o[3], st))
            .sum(),
        _ => f64::NAN,
    };
    total / n
}

/// Model-selection metric: original-scale MAE for the deterministic model,
/// mean negative log-likelihood for the distributional ones.
fn dev_metric(outputs: &[Vec<f64>], head: HeadKind, targets: &TargetSet) -> f64 {
    match (head, targets) {
        (HeadKind::Deterministic, TargetSet::Enrollment(y)) => {
            outputs
                .iter()
                .zip(y)
                .map(|(o, y)| (y - patients_from_log(o[0])).abs())
                .sum::<f64>()
                / y.len() as f64
        }
        _ => eval_loss(outputs, head, targets),
    }
}

fn dev_metric_name(head: HeadKind) -> &'static str {
    match head {
        HeadKind::Deterministic => "mae",
        HeadKind::Gamma => "log_enrollment_nll",
        HeadKind::PoissonGamma => "site_nll",
    }
}

/// Starts the head at the best constant prediction for the training targets.
fn init_output_layer(params: &mut ParamStore, head: HeadKind, targets: &TargetSet) -> Result<()> {
    let bias: Vec<f64> = match (head, targets) {
        (HeadKind::Deterministic, TargetSet::Enrollment(y)) => {
            let mut logs: Vec<f64> = y.iter().map(|v| v.ln_1p()).collect();
            logs.sort_by(f64::total_cmp);
            vec![logs[logs.len() / 2]]
        }
        (HeadKind::Gamma, TargetSet::Enrollment(y)) => {
            let t: Vec<f64> = y.iter().map(|v| v.ln_1p()).collect();
            let p = pooled_fit(t.iter().map(|&x| GammaTarget { mean_ln: x.ln(), mean: x }))?;
            vec![p.shape.ln(), p.rate.ln()]
        }
        (HeadKind::PoissonGamma, TargetSet::Sites(s)) => {
            let r = pooled_fit(s.iter().map(|x| x.0))?;
            let st = pooled_fit(s.iter().map(|x| x.1))?;
            vec![r.shape.ln(), r.rate.ln(), st.shape.ln(), st.rate.ln()]
        }
        _ => return Err(structural("targets do not match the head")),
    };
    let b = params.get_mut("head.out.b").ok_or_else(|| structural("missing head.out.b"))?;
    b.data_mut().copy_from_slice(&bias);
    let w = params.get_mut("head.out.w").ok_or_else(|| structural("missing head.out.w"))?;
    w.data_mut().iter_mut().for_each(|v| *v *= OUTPUT_INIT_SCALE);
    Ok(())
}

fn pooled_fit(stats: impl Iterator<Item = GammaTarget>) -> Result<GammaParams> {
    let (mut n, mut m, mut ml) = (0.0, 0.0, 0.0);
    for t in stats {
        n += 1.0;
        m += t.mean;
        ml += t.mean_ln;
    }
    GammaParams::approx_mle(m / n, ml / n)
}

/// Trains a model and returns the weights with the best development-set
/// metric, together with the per-epoch history.
pub fn train(
    head: HeadKind,
    encoder: Encoder,
    backbone: BackboneConfig,
    config: &TrainConfig,
    train_data: &TrainData,
    dev_data: &TrainData,
) -> Result<(ModelCheckpoint, TrainReport)> {
    backbone.validate()?;
    config.validate()?;
    check_targets(head, train_data, "training")?;
    check_targets(head, dev_data, "development")?;

    let root = RngState::new(config.seed);
    let mut params = init_params(&backbone, head, &mut root.split(0))?;
    init_output_layer(&mut params, head, &train_data.targets)?;
    let mut rng = root.split(1);
    let mut opt = OptimizerState::new(config.optimizer);

    let initial_train_loss = eval_loss(
        &eval_outputs(&params, &backbone, head, &train_data.inputs)?,
        head,
        &train_data.targets,
    );
    let mut best = (
        dev_metric(&eval_outputs(&params, &backbone, head, &dev_data.inputs)?, head, &dev_data.targets),
        0usize,
        params.clone(),
    );
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    for epoch in 1..=config.max_epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(config.batch_size) {
            let refs: Vec<&EncodedTrial> = idx.iter().map(|&i| &train_data.inputs[i]).collect();
            let batch = Batch::from_encoded(&refs, &backbone)?;
            let mut g = Graph::new(Mode::Train, rng.next_u64());
            let out = forward_model(&mut g, &params, &backbone, &batch)?;
            let loss = batch_loss(&mut g, out, head, &train_data.targets, idx)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}, batch {batches}: {e}")))?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("epoch {epoch}, batch {batches}: loss is {lv}")));
            }
            let grads = g.backward(loss)?.into_param_map();
            opt.step(&mut params, &grads, |n| config.lr_for(n))?;
            loss_sum += lv;
            batches += 1;
        }
        let dev = dev_metric(&eval_outputs(&params, &backbone, head, &dev_data.inputs)?, head, &dev_data.targets);
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / batches as f64,
            dev_metric: dev,
        };
        log::debug!("epoch {epoch}: train loss {:.5}, dev {} {:.5}", log.train_loss, dev_metric_name(head), dev);
        epochs.push(log);
        if dev < best.0 {
            best = (dev, epoch, params.clone());
        } else if epoch - best.1 >= config.patience {
            log::info!("early stop at epoch {epoch}; best dev metric {:.5} at epoch {}", best.0, best.1);
            break;
        }
    }

    let (best_dev, best_epoch, best_params) = best;
    let final_train_loss = eval_loss(
        &eval_outputs(&best_params, &backbone, head, &train_data.inputs)?,
        head,
        &train_data.targets,
    );
    let checkpoint = ModelCheckpoint {
        head,
        backbone,
        encoder,
        params: best_params,
        train_config: config.clone(),
        meta: TrainingMeta {
            seed: config.seed,
            epochs_run: epochs.len(),
            best_epoch,
            dev_metric: dev_metric_name(head).to_string(),
            best_dev_metric: best_dev,
        },
    };
    Ok((
        checkpoint,
        TrainReport {
            initial_train_loss,
            final_train_loss,
            epochs,
        },
    ))
}
