use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{structural, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adam with decoupled weight decay.
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
    /// Squared-gradient moving average; the step is `lr·g/√(v+ε)`.
    RmsProp { decay: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adamw() -> Self {
        OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }

    pub fn rmsprop() -> Self {
        OptimizerKind::RmsProp {
            decay: 0.9,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators keyed by parameter name.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. `lr` maps a parameter name to its learning rate, which is
    /// how parameter groups get different rates. Parameters without a
    /// gradient entry are left untouched.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: impl Fn(&str) -> f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else {
                continue;
            };
            if g.shape() != p.shape() {
                return Err(structural(format!(
                    "gradient for {name} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {name}")));
            }
            let rate = lr(name);
            let n = p.len();
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            match self.kind {
                OptimizerKind::AdamW {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                } => {
                    let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    let bc1 = 1.0 - beta1.powf(t);
                    let bc2 = 1.0 - beta2.powf(t);
                    for (((theta, &gi), mi), vi) in
                        p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        *theta -= rate * weight_decay * *theta;
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *theta -= rate * mhat / (vhat.sqrt() + eps);
                    }
                }
                OptimizerKind::RmsProp { decay, eps } => {
                    for ((theta, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                        *vi = decay * *vi + (1.0 - decay) * gi * gi;
                        *theta -= rate * gi / (*vi + eps).sqrt();
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn adamw_step(
    state: &mut OptimizerState,
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    lr: impl Fn(&str) -> f64,
) -> Result<()> {
    debug_assert!(matches!(state.kind, OptimizerKind::AdamW { .. }));
    state.step(params, grads, lr)
}

pub fn rmsprop_step(
    state: &mut OptimizerState,
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    lr: impl Fn(&str) -> f64,
) -> Result<()> {
    debug_assert!(matches!(state.kind, OptimizerKind::RmsProp { .. }));
    state.step(params, grads, lr)
}
