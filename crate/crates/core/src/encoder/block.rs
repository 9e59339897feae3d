//! One conformer block over a packed batch.

use rand::Rng;

use super::EncoderConfig;
use crate::error::Result;
use crate::layers::{affine, init_affine, init_affine_scaled, init_norm, norm};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

pub(super) fn init_block<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    cfg: &EncoderConfig,
    prefix: &str,
    rng: &mut R,
) -> Result<()> {
    let d = cfg.model_dim;
    let hidden = d * cfg.ffn_expansion;
    // residual branch outputs start small so a fresh stack is close to identity
    let gain = 1.0 / ((2 * cfg.num_layers) as f64).sqrt();
    for ffn in ["ffn1", "ffn2"] {
        init_norm(store, &format!("{prefix}/{ffn}/ln"), d)?;
        init_affine(store, &format!("{prefix}/{ffn}/w1"), d, hidden, rng)?;
        init_affine_scaled(store, &format!("{prefix}/{ffn}/w2"), hidden, d, gain, rng)?;
        if ffn == "ffn1" {
            init_norm(store, &format!("{prefix}/mhsa/ln"), d)?;
            for proj in ["q", "k", "v"] {
                init_affine(store, &format!("{prefix}/mhsa/{proj}"), d, d, rng)?;
            }
            init_affine_scaled(store, &format!("{prefix}/mhsa/out"), d, d, gain, rng)?;
            init_norm(store, &format!("{prefix}/conv/ln"), d)?;
            init_affine(store, &format!("{prefix}/conv/pw1"), d, 2 * d, rng)?;
            let k = cfg.conv_kernel;
            store.insert(
                format!("{prefix}/conv/dw/weight"),
                Tensor::randn(&[k, d], 1.0 / (k as f64).sqrt(), rng),
            )?;
            store.insert(format!("{prefix}/conv/dw/bias"), Tensor::zeros(&[d]))?;
            init_norm(store, &format!("{prefix}/conv/norm"), d)?;
            init_affine_scaled(store, &format!("{prefix}/conv/pw2"), d, d, gain, rng)?;
        }
    }
    init_norm(store, &format!("{prefix}/final_ln"), d)
}

fn half_step_ffn<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let h = norm(g, s, &format!("{prefix}/ln"), x)?;
    let h = affine(g, s, &format!("{prefix}/w1"), h)?;
    let h = g.swish(h)?;
    let h = affine(g, s, &format!("{prefix}/w2"), h)?;
    let h = g.scale(h, 0.5)?;
    g.add(x, h)
}

/// Full-context attention computed separately for every utterance and head.
fn self_attention<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    cfg: &EncoderConfig,
    prefix: &str,
    x: Var,
    lengths: &[usize],
) -> Result<Var> {
    let h = norm(g, s, &format!("{prefix}/ln"), x)?;
    let q = affine(g, s, &format!("{prefix}/q"), h)?;
    let q = g.scale(q, 1.0 / (cfg.head_dim() as f64).sqrt())?;
    let k = affine(g, s, &format!("{prefix}/k"), h)?;
    let v = affine(g, s, &format!("{prefix}/v"), h)?;
    let dh = cfg.head_dim();
    let mut utterances = Vec::with_capacity(lengths.len());
    let mut start = 0;
    for &len in lengths {
        let (qs, ks, vs) = (
            g.slice(q, 0, start, start + len)?,
            g.slice(k, 0, start, start + len)?,
            g.slice(v, 0, start, start + len)?,
        );
        let mut heads = Vec::with_capacity(cfg.num_heads);
        for head in 0..cfg.num_heads {
            let (a, b) = (head * dh, (head + 1) * dh);
            let qh = g.slice(qs, 1, a, b)?;
            let kh = g.slice(ks, 1, a, b)?;
            let vh = g.slice(vs, 1, a, b)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let weights = g.softmax(scores)?;
            heads.push(g.matmul(weights, vh)?);
        }
        utterances.push(if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? });
        start += len;
    }
    let ctx = if utterances.len() == 1 { utterances[0] } else { g.concat(&utterances, 0)? };
    let out = affine(g, s, &format!("{prefix}/out"), ctx)?;
    g.add(x, out)
}

fn conv_module<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, prefix: &str, x: Var, lengths: &[usize]) -> Result<Var> {
    let h = norm(g, s, &format!("{prefix}/ln"), x)?;
    let h = affine(g, s, &format!("{prefix}/pw1"), h)?;
    let h = g.glu(h)?;
    let w = g.param(s, &format!("{prefix}/dw/weight"))?;
    let b = g.param(s, &format!("{prefix}/dw/bias"))?;
    let h = g.depthwise_conv1d(h, w, lengths)?;
    let h = g.bias_add(h, b)?;
    let h = norm(g, s, &format!("{prefix}/norm"), h)?;
    let h = g.swish(h)?;
    let h = affine(g, s, &format!("{prefix}/pw2"), h)?;
    g.add(x, h)
}

pub(super) fn forward<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    cfg: &EncoderConfig,
    prefix: &str,
    x: Var,
    lengths: &[usize],
) -> Result<Var> {
    let x = half_step_ffn(g, s, &format!("{prefix}/ffn1"), x)?;
    let x = self_attention(g, s, cfg, &format!("{prefix}/mhsa"), x, lengths)?;
    let x = conv_module(g, s, &format!("{prefix}/conv"), x, lengths)?;
    let x = half_step_ffn(g, s, &format!("{prefix}/ffn2"), x)?;
    norm(g, s, &format!("{prefix}/final_ln"), x)
}
