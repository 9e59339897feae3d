//! Named building blocks shared by the encoder, heads and adapters.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

/// `{prefix}/weight (fan_in, fan_out)` with std `1/sqrt(fan_in)` and a zero
/// `{prefix}/bias`.
pub(crate) fn init_affine<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    init_affine_scaled(store, prefix, fan_in, fan_out, 1.0, rng)
}

/// Like [`init_affine`] with the weight std multiplied by `gain`.
pub(crate) fn init_affine_scaled<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
    rng: &mut R,
) -> Result<()> {
    let std = gain / (fan_in as f64).sqrt();
    store.insert(format!("{prefix}/weight"), Tensor::randn(&[fan_in, fan_out], std, rng))?;
    store.insert(format!("{prefix}/bias"), Tensor::zeros(&[fan_out]))
}

/// Layer-norm `{prefix}/scale` (ones) and `{prefix}/bias` (zeros).
pub(crate) fn init_norm<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Result<()> {
    store.insert(format!("{prefix}/scale"), Tensor::full(&[dim], T::one()))?;
    store.insert(format!("{prefix}/bias"), Tensor::zeros(&[dim]))
}

pub(crate) fn affine<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}/weight"))?;
    let b = g.param(store, &format!("{prefix}/bias"))?;
    g.affine(x, w, b)
}

pub(crate) fn norm<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let scale = g.param(store, &format!("{prefix}/scale"))?;
    let offset = g.param(store, &format!("{prefix}/bias"))?;
    g.layer_norm(x, scale, offset)
}

/// Affine stack with ReLU between layers and none after the last.
pub(crate) fn affine_stack<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefixes: &[String],
    mut x: Var,
) -> Result<Var> {
    for (i, prefix) in prefixes.iter().enumerate() {
        if i > 0 {
            x = g.relu(x)?;
        }
        x = affine(g, store, prefix, x)?;
    }
    Ok(x)
}

/// Parameter count of an affine map.
pub const fn affine_params(fan_in: usize, fan_out: usize) -> usize {
    fan_in * fan_out + fan_out
}
