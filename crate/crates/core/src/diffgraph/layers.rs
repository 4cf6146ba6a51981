//! Parameterized building blocks composed from graph primitives.

use super::{Graph, ParamStore, Var};
use crate::error::{structural, Result};
use crate::randdist::RngState;

/// Negative slope used by every hidden activation.
pub const LEAKY_SLOPE: f64 = 0.01;

/// `x · W + b` with parameters `{name}.w`, `{name}.b`.
pub fn linear(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param_from(store, &format!("{name}.w"))?;
    let b = g.param_from(store, &format!("{name}.b"))?;
    let xw = g.matmul(x, w)?;
    g.add_bias(xw, b)
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, width: usize) {
    store.insert(format!("{name}.gain"), super::Tensor::filled(&[width], 1.0));
    store.insert(format!("{name}.bias"), super::Tensor::zeros(&[width]));
}

pub fn layer_norm(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let gain = g.param_from(store, &format!("{name}.gain"))?;
    let bias = g.param_from(store, &format!("{name}.bias"))?;
    g.layer_norm(x, gain, bias)
}

/// Query/key/value/output projections for [`multi_head_attention`].
pub fn init_attention(store: &mut ParamStore, name: &str, width: usize, rng: &mut RngState) {
    for p in ["q", "k", "v", "o"] {
        store.init_linear(&format!("{name}.{p}"), width, width, rng);
    }
}

/// Multi-head attention of a single query row per batch element over the
/// token list `keys_values` (each `[B,D]`, used as both keys and values).
///
/// Each head runs scaled dot-product attention on its slice of the
/// projected query/keys/values; the concatenated heads go through the
/// output projection.
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    query: Var,
    keys_values: &[Var],
    heads: usize,
) -> Result<Var> {
    let (_, d) = g.value(query).dims2()?;
    if heads == 0 || d % heads != 0 {
        return Err(structural(format!(
            "model width {d} is not divisible by {heads} heads"
        )));
    }
    let tokens = g.stack(keys_values)?;
    let q = linear(g, store, &format!("{name}.q"), query)?;
    let k = linear(g, store, &format!("{name}.k"), tokens)?;
    let v = linear(g, store, &format!("{name}.v"), tokens)?;
    let att = g.attention(q, k, v, heads, keys_values.len())?;
    linear(g, store, &format!("{name}.o"), att)
}
