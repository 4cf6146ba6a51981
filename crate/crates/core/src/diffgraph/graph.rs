use std::collections::BTreeMap;

use super::{ParamStore, Tensor};
use crate::error::{domain, structural, Error, Result};
use crate::randdist::RngState;
use crate::specfun::{digamma_unchecked, ln_gamma_unchecked};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-row sufficient statistics of a Gamma likelihood target: the means of
/// ln x and of x over the samples attached to that row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaTarget {
    pub mean_ln: f64,
    pub mean: f64,
}

impl GammaTarget {
    pub fn single(x: f64) -> Result<Self> {
        if !(x > 0.0) || !x.is_finite() {
            return Err(domain(format!("gamma target must be positive, got {x}")));
        }
        Ok(Self {
            mean_ln: x.ln(),
            mean: x,
        })
    }

    pub fn from_samples(xs: &[f64]) -> Result<Self> {
        if xs.is_empty() {
            return Err(structural("gamma target needs at least one sample"));
        }
        let mut sum_ln = 0.0;
        let mut sum = 0.0;
        for &x in xs {
            if !(x > 0.0) || !x.is_finite() {
                return Err(domain(format!("gamma target must be positive, got {x}")));
            }
            sum_ln += x.ln();
            sum += x;
        }
        let n = xs.len() as f64;
        Ok(Self {
            mean_ln: sum_ln / n,
            mean: sum / n,
        })
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(String),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Dropout(Var, Vec<f64>),
    Exp(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Stack(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        tokens: usize,
        weights: Vec<f64>,
    },
    Column(Var, usize),
    Sum(Var),
    Mean(Var),
    L1LogLoss(Var, Vec<f64>),
    GammaNll {
        shape: Var,
        rate: Var,
        targets: Vec<GammaTarget>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Define-by-run tape. Building a node evaluates it; [`Graph::backward`]
/// walks the tape in reverse.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    rng: RngState,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<String, usize>,
}

impl Gradients {
    /// Gradient w.r.t. any node that required one.
    pub fn of(&self, v: Var) -> Option<Tensor> {
        self.by_node[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    pub fn param(&self, name: &str) -> Option<Tensor> {
        self.params.get(name).and_then(|&i| self.of(Var(i)))
    }

    /// Gradients for every parameter node, zero-filled for parameters the
    /// loss does not depend on.
    pub fn into_param_map(mut self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, &i) in &self.params {
            let data = self.by_node[i]
                .take()
                .unwrap_or_else(|| vec![0.0; self.shapes[i].iter().product()]);
            out.insert(
                name.clone(),
                Tensor::new(self.shapes[i].clone(), data).expect("grad shape"),
            );
        }
        out
    }
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

impl Graph {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            rng: RngState::new(seed),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Input whose gradient is tracked (used by gradient checks).
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Named trainable parameter.
    pub fn param(&mut self, name: &str, t: Tensor) -> Var {
        self.push(t, Op::Param(name.to_string()), true)
    }

    pub fn param_from(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store
            .get(name)
            .ok_or_else(|| structural(format!("missing parameter {name:?}")))?
            .clone();
        Ok(self.param(name, t))
    }

    /// `a [n,k] · b [k,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        let (k2, m) = self.value(b).dims2()?;
        if k != k2 {
            return Err(structural(format!(
                "matmul inner dimensions differ: [{n},{k}] x [{k2},{m}]"
            )));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let s = av[i * k + p];
                if s == 0.0 {
                    continue;
                }
                let brow = &bv[p * m..(p + 1) * m];
                for (o, &bb) in orow.iter_mut().zip(brow) {
                    *o += s * bb;
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), ng))
    }

    /// `x [n,m] + bias [m]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        if self.value(bias).shape() != [m] {
            return Err(structural(format!(
                "bias shape {:?} does not match width {m}",
                self.value(bias).shape()
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, bb) in row.iter_mut().zip(&b) {
                *o += bb;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::AddBias(x, bias), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(structural(format!(
                "add shapes differ: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect())
            .expect("same shape");
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&v| leaky(v, slope)).collect(),
        )
        .expect("same shape");
        let ng = self.ng(x);
        self.push(out, Op::LeakyRelu(x, slope), ng)
    }

    /// Inverted dropout with drop probability `rate`; identity in eval mode.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(domain(format!("dropout rate must be in [0,1), got {rate}")));
        }
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.uniform() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let t = self.value(x);
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().zip(&mask).map(|(v, m)| v * m).collect(),
        )?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Dropout(x, mask), ng))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.exp()).collect())
            .expect("same shape");
        let ng = self.ng(x);
        self.push(out, Op::Exp(x), ng)
    }

    /// Row-wise layer normalization over the last dimension, then `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if d < 2 {
            return Err(structural("layer norm needs a last dimension of at least 2"));
        }
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(structural("layer norm gain/bias must match the row width"));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Interleaves `T` matrices of shape `[B,D]` into a token matrix
    /// `[B·T, D]` whose row `b·T + t` is row `b` of input `t`.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| structural("stack needs at least one input"))?;
        let (b, d) = self.value(first).dims2()?;
        for &p in parts {
            if self.value(p).shape() != [b, d] {
                return Err(structural("stack inputs must share a shape"));
            }
        }
        let t = parts.len();
        let mut out = vec![0.0; b * t * d];
        for (ti, &p) in parts.iter().enumerate() {
            let src = self.value(p).data();
            for r in 0..b {
                out[(r * t + ti) * d..(r * t + ti + 1) * d]
                    .copy_from_slice(&src[r * d..(r + 1) * d]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(vec![b * t, d], out)?,
            Op::Stack(parts.to_vec()),
            ng,
        ))
    }

    /// Scaled dot-product attention of one query row per batch element
    /// against `tokens` key/value rows, split over `heads` heads.
    /// `q: [B,D]`, `k, v: [B·tokens, D]` → `[B,D]` (heads concatenated).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, tokens: usize) -> Result<Var> {
        let (b, d) = self.value(q).dims2()?;
        if heads == 0 || d % heads != 0 {
            return Err(structural(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        if self.value(k).shape() != [b * tokens, d] || self.value(v).shape() != [b * tokens, d] {
            return Err(structural("attention keys/values must be [B*tokens, D]"));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mut weights = vec![0.0; b * heads * tokens];
        let mut out = vec![0.0; b * d];
        let mut scores = vec![0.0; tokens];
        for r in 0..b {
            for h in 0..heads {
                let qh = &qv[r * d + h * dh..r * d + (h + 1) * dh];
                let mut max = f64::NEG_INFINITY;
                for (t, s) in scores.iter_mut().enumerate() {
                    let row = (r * tokens + t) * d + h * dh;
                    let kh = &kv[row..row + dh];
                    *s = qh.iter().zip(kh).map(|(a, c)| a * c).sum::<f64>() * scale;
                    max = max.max(*s);
                }
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let w = &mut weights[(r * heads + h) * tokens..(r * heads + h + 1) * tokens];
                for (wt, s) in w.iter_mut().zip(&scores) {
                    *wt = s / z;
                }
                let o = &mut out[r * d + h * dh..r * d + (h + 1) * dh];
                for (t, &wt) in w.iter().enumerate() {
                    let row = (r * tokens + t) * d + h * dh;
                    for (oo, vvv) in o.iter_mut().zip(&vv[row..row + dh]) {
                        *oo += wt * vvv;
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            Tensor::new(vec![b, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                tokens,
                weights,
            },
            ng,
        ))
    }

    /// Softmax weights of an attention node, laid out `[B, heads, tokens]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Column `j` of a matrix, as a vector.
    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        let (n, c) = self.value(x).dims2()?;
        if j >= c {
            return Err(structural(format!("column {j} out of range for width {c}")));
        }
        let xv = self.value(x).data();
        let out: Vec<f64> = (0..n).map(|r| xv[r * c + j]).collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::vector(out), Op::Column(x, j), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Mean of `|ln(count + 1) − pred_log|` over the batch.
    pub fn l1_log_loss(&mut self, pred_log: Var, target_count: &[f64]) -> Result<Var> {
        let p = self.value(pred_log);
        if p.shape() != [target_count.len()] {
            return Err(structural(format!(
                "prediction shape {:?} does not match {} targets",
                p.shape(),
                target_count.len()
            )));
        }
        if !p.all_finite() || target_count.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::Numeric("non-finite input to l1 log loss".into()));
        }
        let logs: Vec<f64> = target_count.iter().map(|t| t.ln_1p()).collect();
        let n = logs.len().max(1) as f64;
        let loss = p
            .data()
            .iter()
            .zip(&logs)
            .map(|(p, t)| (t - p).abs())
            .sum::<f64>()
            / n;
        let ng = self.ng(pred_log);
        Ok(self.push(Tensor::scalar(loss), Op::L1LogLoss(pred_log, logs), ng))
    }

    /// Mean over rows of the Gamma negative log-likelihood with
    /// shape = exp(shape_logit) and rate = exp(rate_logit).
    pub fn gamma_nll(&mut self, shape_logit: Var, rate_logit: Var, targets: &[GammaTarget]) -> Result<Var> {
        let n = targets.len();
        if self.value(shape_logit).shape() != [n] || self.value(rate_logit).shape() != [n] {
            return Err(structural("gamma nll logits must be vectors matching the targets"));
        }
        let sl = self.value(shape_logit).data();
        let rl = self.value(rate_logit).data();
        let mut total = 0.0;
        for i in 0..n {
            let a = sl[i].exp();
            let lam = rl[i].exp();
            let t = targets[i];
            let ll = a * rl[i] - ln_gamma_unchecked(a) + (a - 1.0) * t.mean_ln - lam * t.mean;
            total -= ll;
        }
        let loss = total / n.max(1) as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("gamma nll is not finite ({loss})")));
        }
        let ng = self.ng(shape_logit) || self.ng(rate_logit);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::GammaNll {
                shape: shape_logit,
                rate: rate_logit,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(structural(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
            if !nodes[v.0].needs_grad {
                return;
            }
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(g);
        }

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let (rows, k) = self.value(*a).dims2()?;
                    let m = self.value(*b).shape()[1];
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    acc(&mut grads, &self.nodes, *a, |ga| {
                        for i in 0..rows {
                            let gr = &gout[i * m..(i + 1) * m];
                            for p in 0..k {
                                let br = &bv[p * m..(p + 1) * m];
                                ga[i * k + p] += gr.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                    acc(&mut grads, &self.nodes, *b, |gb| {
                        for i in 0..rows {
                            let gr = &gout[i * m..(i + 1) * m];
                            for p in 0..k {
                                let s = av[i * k + p];
                                if s == 0.0 {
                                    continue;
                                }
                                for (o, g) in gb[p * m..(p + 1) * m].iter_mut().zip(gr) {
                                    *o += s * g;
                                }
                            }
                        }
                    });
                }
                Op::AddBias(x, b) => {
                    let m = self.value(*b).len();
                    acc(&mut grads, &self.nodes, *x, |gx| {
                        for (o, g) in gx.iter_mut().zip(&gout) {
                            *o += g;
                        }
                    });
                    acc(&mut grads, &self.nodes, *b, |gb| {
                        for row in gout.chunks(m) {
                            for (o, g) in gb.iter_mut().zip(row) {
                                *o += g;
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        acc(&mut grads, &self.nodes, v, |gx| {
                            for (o, g) in gx.iter_mut().zip(&gout) {
                                *o += g;
                            }
                        });
                    }
                }
                Op::Scale(x, c) => {
                    acc(&mut grads, &self.nodes, *x, |gx| {
                        for (o, g) in gx.iter_mut().zip(&gout) {
                            *o += c * g;
                        }
                    });
                }
                Op::LeakyRelu(x, slope) => {
                    let xv = self.value(*x).data();
                    acc(&mut grads, &self.nodes, *x, |gx| {
                        for ((o, g), &xx) in gx.iter_mut().zip(&gout).zip(xv) {
                            *o += if xx >= 0.0 { *g } else { slope * g };
                        }
                    });
                }
                Op::Dropout(x, mask) => {
                    acc(&mut grads, &self.nodes, *x, |gx| {
                        for ((o, g), m) in gx.iter_mut().zip(&gout).zip(mask) {
                            *o += g * m;
                        }
                    });
                }
                Op::Exp(x) => {
                    let y = node.value.data();
                    acc(&mut grads, &self.nodes, *x, |gx| {
                        for ((o, g), yy) in gx.iter_mut().zip(&gout).zip(y) {
                            *o += g * yy;
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let d = self.value(*gain).len();
                    let g = self.value(*gain).data();
                    acc(&mut grads, &self.nodes, *gain, |gg| {
                        for (r, row) in gout.chunks(d).enumerate() {
                            for j in 0..d {
                                gg[j] += row[j] * xhat[r * d + j];
                            }
                        }
                    });
                    acc(&mut grads, &self.nodes, *bias, |gb| {
                        for row in gout.chunks(d) {
                            for (o, v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    });
                    acc(&mut grads, &self.nodes, *x, |gx| {
                        let mut dxhat = vec![0.0; d];
                        for (r, row) in gout.chunks(d).enumerate() {
                            let xh = &xhat[r * d..(r + 1) * d];
                            for j in 0..d {
                                dxhat[j] = row[j] * g[j];
                            }
                            let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                            let mean_dx =
                                dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                            for j in 0..d {
                                gx[r * d + j] += inv_std[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                            }
                        }
                    });
                }
                Op::Stack(parts) => {
                    let t = parts.len();
                    let (b, d) = self.value(parts[0]).dims2()?;
                    for (ti, &p) in parts.iter().enumerate() {
                        acc(&mut grads, &self.nodes, p, |gp| {
                            for r in 0..b {
                                let src = &gout[(r * t + ti) * d..(r * t + ti + 1) * d];
                                for (o, s) in gp[r * d..(r + 1) * d].iter_mut().zip(src) {
                                    *o += s;
                                }
                            }
                        });
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    tokens,
                    weights,
                } => {
                    let (heads, tokens) = (*heads, *tokens);
                    let (b, d) = self.value(*q).dims2()?;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let qv = self.value(*q).data();
                    let kv = self.value(*k).data();
                    let vv = self.value(*v).data();
                    // d(score) per (row, head, token)
                    let mut dscore = vec![0.0; b * heads * tokens];
                    let mut dw = vec![0.0; tokens];
                    for r in 0..b {
                        for h in 0..heads {
                            let go = &gout[r * d + h * dh..r * d + (h + 1) * dh];
                            let w = &weights[(r * heads + h) * tokens..(r * heads + h + 1) * tokens];
                            for (t, dwt) in dw.iter_mut().enumerate() {
                                let row = (r * tokens + t) * d + h * dh;
                                *dwt = go.iter().zip(&vv[row..row + dh]).map(|(a, c)| a * c).sum();
                            }
                            let dot: f64 = w.iter().zip(&dw).map(|(a, c)| a * c).sum();
                            for t in 0..tokens {
                                dscore[(r * heads + h) * tokens + t] = w[t] * (dw[t] - dot);
                            }
                        }
                    }
                    acc(&mut grads, &self.nodes, *v, |gv| {
                        for r in 0..b {
                            for h in 0..heads {
                                let go = &gout[r * d + h * dh..r * d + (h + 1) * dh];
                                for t in 0..tokens {
                                    let wt = weights[(r * heads + h) * tokens + t];
                                    let row = (r * tokens + t) * d + h * dh;
                                    for (o, g) in gv[row..row + dh].iter_mut().zip(go) {
                                        *o += wt * g;
                                    }
                                }
                            }
                        }
                    });
                    acc(&mut grads, &self.nodes, *q, |gq| {
                        for r in 0..b {
                            for h in 0..heads {
                                for t in 0..tokens {
                                    let ds = dscore[(r * heads + h) * tokens + t] * scale;
                                    let row = (r * tokens + t) * d + h * dh;
                                    for (o, kk) in gq[r * d + h * dh..r * d + (h + 1) * dh]
                                        .iter_mut()
                                        .zip(&kv[row..row + dh])
                                    {
                                        *o += ds * kk;
                                    }
                                }
                            }
                        }
                    });
                    acc(&mut grads, &self.nodes, *k, |gk| {
                        for r in 0..b {
                            for h in 0..heads {
                                let qh = &qv[r * d + h * dh..r * d + (h + 1) * dh];
                                for t in 0..tokens {
                                    let ds = dscore[(r * heads + h) * tokens + t] * scale;
                                    let row = (r * tokens + t) * d + h * dh;
                                    for (o, qq) in gk[row..row + dh].iter_mut().zip(qh) {
                                        *o += ds * qq;
                                    }
                                }
                            }
                        }
                    });
                }
                Op::Column(x, j) => {
                    let c = self.value(*x).shape()[1];
                    acc(&mut grads, &self.nodes, *x, |gx| {
                        for (r, g) in gout.iter().enumerate() {
                            gx[r * c + j] += g;
                        }
                    });
                }
                Op::Sum(x) => {
                    acc(&mut grads, &self.nodes, *x, |gx| {
                        for o in gx.iter_mut() {
                            *o += gout[0];
                        }
                    });
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len().max(1) as f64;
                    acc(&mut grads, &self.nodes, *x, |gx| {
                        for o in gx.iter_mut() {
                            *o += gout[0] / n;
                        }
                    });
                }
                Op::L1LogLoss(p, logs) => {
                    let pv = self.value(*p).data();
                    let n = logs.len().max(1) as f64;
                    acc(&mut grads, &self.nodes, *p, |gp| {
                        for ((o, pp), t) in gp.iter_mut().zip(pv).zip(logs) {
                            let diff = pp - t;
                            let s = if diff > 0.0 {
                                1.0
                            } else if diff < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            *o += gout[0] * s / n;
                        }
                    });
                }
                Op::GammaNll {
                    shape,
                    rate,
                    targets,
                } => {
                    let sl = self.value(*shape).data();
                    let rl = self.value(*rate).data();
                    let n = targets.len().max(1) as f64;
                    acc(&mut grads, &self.nodes, *shape, |gs| {
                        for i in 0..targets.len() {
                            let a = sl[i].exp();
                            // d/d(ln a) of -ll = a (ψ(a) − ln λ − mean ln x)
                            gs[i] += gout[0] * a * (digamma_unchecked(a) - rl[i] - targets[i].mean_ln) / n;
                        }
                    });
                    acc(&mut grads, &self.nodes, *rate, |gr| {
                        for i in 0..targets.len() {
                            let a = sl[i].exp();
                            let lam = rl[i].exp();
                            // d/d(ln λ) of -ll = λ·mean x − a
                            gr[i] += gout[0] * (lam * targets[i].mean - a) / n;
                        }
                    });
                }
            }
            grads[idx] = Some(gout);
        }

        let mut params = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                params.insert(name.clone(), i);
            }
        }
        // Only report gradients for leaves; intermediate buffers are dropped.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Param(_) | Op::Input) {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            by_node: grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params,
        })
    }
}
