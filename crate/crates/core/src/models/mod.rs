//! The three enrollment networks: a deterministic regressor of
//! ln(enrollment + 1), a Gamma regressor over the same quantity, and the
//! network that predicts site-level enrollment-rate and startup-time
//! distributions for the Poisson-Gamma simulator.
//!
//! All three share one backbone: two-layer encoders for the text
//! embedding, the multi-hot key attributes and the standardized counts;
//! attention with the embedding as query over the other two branches; a
//! residual connection and layer norm. Only the output head differs.

mod checkpoint;
mod train;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use train::{train, EpochLog, TargetSet, TrainData, TrainReport};

use crate::diffgraph::{
    init_attention, init_layer_norm, layer_norm, linear, multi_head_attention, Graph, Mode, ParamStore, Tensor, Var,
    LEAKY_SLOPE,
};
use crate::diffgraph::OptimizerKind;
use crate::encoding::{EncodedTrial, Encoder};
use crate::error::{domain, structural, Error, Result};
use crate::randdist::{GammaParams, RngState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Deterministic,
    Gamma,
    PoissonGamma,
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::Deterministic => 1,
            HeadKind::Gamma => 2,
            HeadKind::PoissonGamma => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Deterministic => "deterministic",
            HeadKind::Gamma => "gamma",
            HeadKind::PoissonGamma => "poisson-gamma",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// d₃: text embedding width.
    pub emb_width: usize,
    /// d₁: multi-hot width.
    pub cat_width: usize,
    /// d₂: numeric feature count.
    pub num_width: usize,
    pub hidden: usize,
    pub heads: usize,
    pub cat_dropout: f64,
    pub branch_layers: usize,
}

impl BackboneConfig {
    pub fn new(emb_width: usize, cat_width: usize, num_width: usize) -> Self {
        Self {
            emb_width,
            cat_width,
            num_width,
            hidden: 64,
            heads: 4,
            cat_dropout: 0.3,
            branch_layers: 2,
        }
    }

    pub fn for_encoder(encoder: &Encoder) -> Self {
        Self::new(encoder.embedding_dim, encoder.cat_width(), encoder.num_width())
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(structural(format!(
                "hidden width {} must be a positive multiple of {} heads",
                self.hidden, self.heads
            )));
        }
        if self.hidden < 4 {
            return Err(structural("hidden width must be at least 4"));
        }
        if !(0.0..1.0).contains(&self.cat_dropout) {
            return Err(structural(format!("dropout {} outside [0,1)", self.cat_dropout)));
        }
        if self.branch_layers == 0 {
            return Err(structural("branches need at least one layer"));
        }
        if self.emb_width == 0 || self.cat_width == 0 || self.num_width == 0 {
            return Err(structural("input widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Learning rate of the three input branches.
    pub input_lr: f64,
    /// Learning rate of attention, norm and head.
    pub body_lr: f64,
    pub optimizer: OptimizerKind,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Settings for the trial-level regressors.
    pub fn study(seed: u64) -> Self {
        Self {
            batch_size: 256,
            input_lr: 1e-4,
            body_lr: 1e-3,
            optimizer: OptimizerKind::adamw(),
            max_epochs: 200,
            patience: 20,
            seed,
        }
    }

    /// Settings for the site-parameter network: a fixed 256-epoch budget.
    pub fn poisson_gamma(seed: u64) -> Self {
        Self {
            batch_size: 32,
            input_lr: 1e-4,
            body_lr: 1e-4,
            optimizer: OptimizerKind::adamw(),
            max_epochs: 256,
            patience: 256,
            seed,
        }
    }

    pub fn for_head(head: HeadKind, seed: u64) -> Self {
        match head {
            HeadKind::PoissonGamma => Self::poisson_gamma(seed),
            _ => Self::study(seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Usage("batch size, epochs and patience must be positive".into()));
        }
        if !(self.input_lr > 0.0 && self.body_lr > 0.0) {
            return Err(Error::Usage("learning rates must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for a parameter, by group.
    pub fn lr_for(&self, name: &str) -> f64 {
        if is_input_param(name) {
            self.input_lr
        } else {
            self.body_lr
        }
    }
}

const INPUT_PREFIXES: [&str; 3] = ["emb.", "cat.", "num."];

pub fn is_input_param(name: &str) -> bool {
    INPUT_PREFIXES.iter().any(|p| name.starts_with(p))
}

/// Fresh parameters for a backbone plus head.
pub fn init_params(config: &BackboneConfig, head: HeadKind, rng: &mut RngState) -> Result<ParamStore> {
    config.validate()?;
    let d = config.hidden;
    let mut store = ParamStore::new();
    for (branch, width) in [("emb", config.emb_width), ("cat", config.cat_width), ("num", config.num_width)] {
        for l in 0..config.branch_layers {
            let fan_in = if l == 0 { width } else { d };
            store.init_linear(&format!("{branch}.{l}"), fan_in, d, rng);
        }
    }
    init_attention(&mut store, "att", d, rng);
    init_layer_norm(&mut store, "norm", d);
    store.init_linear("head.hidden", d, d / 2, rng);
    store.init_linear("head.out", d / 2, head.outputs(), rng);
    Ok(store)
}

/// Row-major input matrices for a batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub emb: Tensor,
    pub cat: Tensor,
    pub num: Tensor,
}

impl Batch {
    pub fn from_encoded(trials: &[&EncodedTrial], config: &BackboneConfig) -> Result<Self> {
        let b = trials.len();
        if b == 0 {
            return Err(structural("empty batch"));
        }
        let gather = |f: fn(&EncodedTrial) -> &[f64], width: usize, what: &str| -> Result<Tensor> {
            let mut data = Vec::with_capacity(b * width);
            for t in trials {
                let row = f(t);
                if row.len() != width {
                    return Err(structural(format!("{what} width {} does not match model width {width}", row.len())));
                }
                data.extend_from_slice(row);
            }
            Tensor::new(vec![b, width], data)
        };
        Ok(Self {
            emb: gather(|t| &t.x_emb, config.emb_width, "embedding")?,
            cat: gather(|t| &t.x_cat, config.cat_width, "categorical")?,
            num: gather(|t| &t.x_num, config.num_width, "numeric")?,
        })
    }
}

fn branch(g: &mut Graph, store: &ParamStore, name: &str, layers: usize, dropout: f64, x: Var) -> Result<Var> {
    let mut z = x;
    for l in 0..layers {
        let lin = linear(g, store, &format!("{name}.{l}"), z)?;
        z = g.leaky_relu(lin, LEAKY_SLOPE);
        if l == 0 && dropout > 0.0 {
            z = g.dropout(z, dropout)?;
        }
    }
    Ok(z)
}

/// The shared representation `h = LayerNorm(attention + z_emb)`, `[B, D]`.
pub fn forward_backbone(g: &mut Graph, store: &ParamStore, config: &BackboneConfig, batch: &Batch) -> Result<Var> {
    let e = g.input(batch.emb.clone());
    let c = g.input(batch.cat.clone());
    let n = g.input(batch.num.clone());
    let z_emb = branch(g, store, "emb", config.branch_layers, 0.0, e)?;
    let z_cat = branch(g, store, "cat", config.branch_layers, config.cat_dropout, c)?;
    let z_num = branch(g, store, "num", config.branch_layers, 0.0, n)?;
    let att = multi_head_attention(g, store, "att", z_emb, &[z_cat, z_num], config.heads)?;
    let res = g.add(att, z_emb)?;
    layer_norm(g, store, "norm", res)
}

/// Backbone plus head: raw output logits `[B, outputs]`.
pub fn forward_model(g: &mut Graph, store: &ParamStore, config: &BackboneConfig, batch: &Batch) -> Result<Var> {
    let h = forward_backbone(g, store, config, batch)?;
    let hidden = linear(g, store, "head.hidden", h)?;
    let hidden = g.leaky_relu(hidden, LEAKY_SLOPE);
    linear(g, store, "head.out", hidden)
}

/// Equal-tailed prediction interval on the patient scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionInterval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

impl PredictionInterval {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Site-level distributions: enrollment rate (patients/site/month) and
/// startup time (months).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoissonGammaParams {
    pub rate_dist: GammaParams,
    pub startup_dist: GammaParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub dev_metric: String,
    pub best_dev_metric: f64,
}

/// Everything needed to reproduce predictions: encoders, architecture,
/// weights and how they were trained.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub head: HeadKind,
    pub backbone: BackboneConfig,
    pub encoder: Encoder,
    pub params: ParamStore,
    pub train_config: TrainConfig,
    pub meta: TrainingMeta,
}

/// Rows per forward pass at prediction time.
const PREDICT_CHUNK: usize = 512;

/// Eval-mode outputs of arbitrary weights, computed in parallel chunks.
pub(crate) fn eval_outputs(
    store: &ParamStore,
    config: &BackboneConfig,
    head: HeadKind,
    trials: &[EncodedTrial],
) -> Result<Vec<Vec<f64>>> {
    let k = head.outputs();
    let chunks: Vec<Vec<Vec<f64>>> = trials
        .par_chunks(PREDICT_CHUNK)
        .map(|chunk| {
            let refs: Vec<&EncodedTrial> = chunk.iter().collect();
            let batch = Batch::from_encoded(&refs, config)?;
            let mut g = Graph::new(Mode::Eval, 0);
            let out = forward_model(&mut g, store, config, &batch)?;
            let v = g.value(out);
            if !v.all_finite() {
                return Err(Error::Numeric("model produced non-finite outputs".into()));
            }
            Ok(v.data().chunks(k).map(<[f64]>::to_vec).collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Inverse of the ln(y+1) target transform, clamped at zero.
pub fn patients_from_log(pred_log: f64) -> f64 {
    (pred_log.exp() - 1.0).max(0.0)
}

impl ModelCheckpoint {
    fn expect_head(&self, head: HeadKind) -> Result<()> {
        if self.head != head {
            return Err(Error::Usage(format!(
                "this is a {} model; the operation needs a {} model",
                self.head.name(),
                head.name()
            )));
        }
        Ok(())
    }

    /// Eval-mode output logits, one row per trial.
    pub fn outputs(&self, trials: &[EncodedTrial]) -> Result<Vec<Vec<f64>>> {
        eval_outputs(&self.params, &self.backbone, self.head, trials)
    }

    pub fn predict_point_many(&self, trials: &[EncodedTrial]) -> Result<Vec<f64>> {
        match self.head {
            HeadKind::Deterministic => Ok(self.outputs(trials)?.iter().map(|o| patients_from_log(o[0])).collect()),
            HeadKind::Gamma => Ok(self
                .predict_distribution_many(trials)?
                .iter()
                .map(|p| patients_from_log(p.mean()))
                .collect()),
            HeadKind::PoissonGamma => Err(Error::Usage(
                "point enrollment forecasts need a deterministic or gamma model".into(),
            )),
        }
    }

    /// Predicted enrollment. The Gamma model reports the exponentiated mean
    /// of its log-scale distribution, minus one.
    pub fn predict_point(&self, trial: &EncodedTrial) -> Result<f64> {
        Ok(self.predict_point_many(std::slice::from_ref(trial))?[0])
    }

    pub fn predict_distribution_many(&self, trials: &[EncodedTrial]) -> Result<Vec<GammaParams>> {
        self.expect_head(HeadKind::Gamma)?;
        self.outputs(trials)?
            .iter()
            .map(|o| GammaParams::from_logits(o[0], o[1]))
            .collect()
    }

    /// Distribution of ln(enrollment + 1).
    pub fn predict_distribution(&self, trial: &EncodedTrial) -> Result<GammaParams> {
        Ok(self.predict_distribution_many(std::slice::from_ref(trial))?[0])
    }

    pub fn predict_interval_many(&self, trials: &[EncodedTrial], significance: f64) -> Result<Vec<PredictionInterval>> {
        check_significance(significance)?;
        self.predict_distribution_many(trials)?
            .iter()
            .map(|p| interval_from_log_gamma(p, significance))
            .collect()
    }

    pub fn predict_interval(&self, trial: &EncodedTrial, significance: f64) -> Result<PredictionInterval> {
        Ok(self.predict_interval_many(std::slice::from_ref(trial), significance)?[0])
    }

    pub fn predict_site_params_many(&self, trials: &[EncodedTrial]) -> Result<Vec<PoissonGammaParams>> {
        self.expect_head(HeadKind::PoissonGamma)?;
        self.outputs(trials)?
            .iter()
            .map(|o| {
                Ok(PoissonGammaParams {
                    rate_dist: GammaParams::from_logits(o[0], o[1])?,
                    startup_dist: GammaParams::from_logits(o[2], o[3])?,
                })
            })
            .collect()
    }

    pub fn predict_site_params(&self, trial: &EncodedTrial) -> Result<PoissonGammaParams> {
        Ok(self.predict_site_params_many(std::slice::from_ref(trial))?[0])
    }
}

fn check_significance(significance: f64) -> Result<()> {
    if !(significance > 0.0 && significance < 1.0) {
        return Err(domain(format!("significance must be in (0,1), got {significance}")));
    }
    Ok(())
}

/// Equal-tailed interval of a Gamma over ln(y+1), mapped to patients.
pub fn interval_from_log_gamma(params: &GammaParams, significance: f64) -> Result<PredictionInterval> {
    check_significance(significance)?;
    let lo = params.quantile(significance / 2.0)?;
    let hi = params.quantile(1.0 - significance / 2.0)?;
    Ok(PredictionInterval {
        lower: lo.exp() - 1.0,
        upper: hi.exp() - 1.0,
        level: 1.0 - significance,
    })
}

#[cfg(test)]
mod tests;
