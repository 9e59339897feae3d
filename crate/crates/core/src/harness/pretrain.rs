//! Masked-prediction pretraining with a random-projection quantizer.
//!
//! Targets come from a frozen random projection of stacked input frames,
//! matched to the nearest entry of a frozen random codebook. Contiguous spans
//! of subsampled frames are replaced by a learned mask embedding, and a
//! linear head over the top block predicts the code of every masked frame.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::optim::Adam;
use super::synth::{Batch, EpochSampler, Utterance};
use crate::encoder::{Encoder, TapSet};
use crate::error::{Error, Result};
use crate::layers::{affine, init_affine};
use crate::tensor::{Graph, ParamStore, Real, Tensor};

pub const MASK_EMBEDDING: &str = "pretrain/mask_embedding";
pub const PRETRAIN_HEAD: &str = "pretrain/head";

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub mask_prob: f64,
    pub mask_span: usize,
    pub codebook_size: usize,
    pub codebook_dim: usize,
    pub seed: u64,
    /// Steps averaged at the start and end of the run for the sanity gate.
    pub gate_window: usize,
    /// The final average must be at most this fraction of the initial one.
    pub gate_ratio: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            warmup_steps: 200,
            mask_prob: 0.15,
            mask_span: 4,
            codebook_size: 64,
            codebook_dim: 16,
            seed: 0,
            gate_window: 50,
            gate_ratio: 0.7,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("steps", self.steps),
            ("batch_size", self.batch_size),
            ("mask_span", self.mask_span),
            ("codebook_dim", self.codebook_dim),
            ("gate_window", self.gate_window),
        ] {
            if v == 0 {
                return Err(Error::config(format!("pretrain.{field}"), "must be positive"));
            }
        }
        if self.codebook_size < 2 {
            return Err(Error::config("pretrain.codebook_size", "need at least 2 codes"));
        }
        if !(self.mask_prob > 0.0 && self.mask_prob <= 1.0) {
            return Err(Error::config(
                "pretrain.mask_prob",
                format!("must be in (0, 1], got {}; without masking there is nothing to predict", self.mask_prob),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("pretrain.lr", format!("must be positive, got {}", self.lr)));
        }
        if !(self.gate_ratio > 0.0 && self.gate_ratio <= 1.0) {
            return Err(Error::config("pretrain.gate_ratio", "must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Frozen random-projection quantizer over stacks of `stack` input frames.
#[derive(Clone, Debug)]
pub struct Quantizer {
    stack: usize,
    input_dim: usize,
    /// Row-major `(stack * input_dim, codebook_dim)`.
    projection: Vec<f64>,
    /// Unit-norm codes, row-major `(codebook_size, codebook_dim)`.
    codebook: Vec<f64>,
    codebook_dim: usize,
}

impl Quantizer {
    pub fn new(stack: usize, input_dim: usize, codebook_size: usize, codebook_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = stack * input_dim;
        let scale = 1.0 / (fan_in as f64).sqrt();
        let projection = (0..fan_in * codebook_dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut codebook: Vec<f64> = (0..codebook_size * codebook_dim).map(|_| rng.sample(StandardNormal)).collect();
        codebook.chunks_exact_mut(codebook_dim).for_each(normalize);
        Quantizer {
            stack,
            input_dim,
            projection,
            codebook,
            codebook_dim,
        }
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook.len() / self.codebook_dim
    }

    /// Code of every complete stack of frames.
    pub fn codes(&self, utterance: &Utterance) -> Vec<usize> {
        let width = self.stack * self.input_dim;
        utterance
            .frames
            .chunks_exact(width)
            .take(utterance.num_frames / self.stack)
            .map(|x| {
                let mut z = vec![0.0; self.codebook_dim];
                for (xi, row) in x.iter().zip(self.projection.chunks_exact(self.codebook_dim)) {
                    z.iter_mut().zip(row).for_each(|(zj, w)| *zj += xi * w);
                }
                normalize(&mut z);
                let mut best = (0, f64::NEG_INFINITY);
                for (c, code) in self.codebook.chunks_exact(self.codebook_dim).enumerate() {
                    let sim: f64 = code.iter().zip(&z).map(|(a, b)| a * b).sum();
                    if sim > best.1 {
                        best = (c, sim);
                    }
                }
                best.0
            })
            .collect()
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Span mask over `len` frames: every frame starts a masked span of `span`
/// frames with probability `prob`.
pub fn span_mask(len: usize, prob: f64, span: usize, rng: &mut impl Rng) -> Vec<bool> {
    let mut mask = vec![false; len];
    for start in 0..len {
        if rng.gen_bool(prob) {
            mask[start..(start + span).min(len)].iter_mut().for_each(|m| *m = true);
        }
    }
    mask
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl PretrainOutcome {
    pub fn gate_passed(&self, ratio: f64) -> bool {
        self.final_loss <= ratio * self.initial_loss
    }
}

fn window_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Trains every encoder parameter on masked code prediction. Frontend
/// subsampling must equal the quantizer stack, so each subsampled frame has
/// one target.
pub fn pretrain_masked_prediction<T: Real>(
    encoder: &mut Encoder<T>,
    data: &[Utterance],
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("empty pretraining set".into()));
    }
    let ecfg = *encoder.config();
    encoder.params_mut().set_trainable("**", true)?;
    let quantizer = Quantizer::new(
        ecfg.frontend_subsampling,
        ecfg.input_dim,
        cfg.codebook_size,
        cfg.codebook_dim,
        cfg.seed ^ 0x9e37,
    );
    let targets: Vec<Vec<usize>> = data.iter().map(|u| quantizer.codes(u)).collect();
    let d = ecfg.model_dim;
    let mut extra = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    extra.insert(MASK_EMBEDDING, Tensor::randn(&[1, d], 0.02, &mut rng))?;
    init_affine(&mut extra, PRETRAIN_HEAD, d, cfg.codebook_size, &mut rng)?;
    let top = TapSet::top(ecfg.num_layers);
    let mut sampler = EpochSampler::new(data.len(), cfg.seed ^ 0x7a11);
    let mut adam = Adam::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = sampler.next_batch(cfg.batch_size);
        let batch = Batch::<T>::gather(data, &idx, ecfg.input_dim)?;
        let lengths = encoder.output_lengths(&batch.lengths)?;
        let mut mask = Vec::new();
        let mut labels = Vec::new();
        for (&i, &len) in idx.iter().zip(&lengths) {
            mask.extend(span_mask(len, cfg.mask_prob, cfg.mask_span, &mut rng));
            labels.extend_from_slice(&targets[i][..len]);
        }
        if !mask.iter().any(|&m| m) {
            let i = rng.gen_range(0..mask.len());
            mask[i] = true;
        }
        let rows = mask.len();
        let mut g = Graph::new();
        let (x, _) = encoder.subsample_frontend(&mut g, &batch.frames, &batch.lengths)?;
        let x = g.in_scope("pretrain", |g| -> Result<_> {
            let keep: Vec<T> = mask
                .iter()
                .flat_map(|&m| std::iter::repeat(if m { T::zero() } else { T::one() }).take(d))
                .collect();
            let keep = g.constant(Tensor::new(vec![rows, d], keep)?);
            let col: Vec<T> = mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
            let col = g.constant(Tensor::new(vec![rows, 1], col)?);
            let emb = g.param(&extra, MASK_EMBEDDING)?;
            let kept = g.mul(x, keep)?;
            let filled = g.matmul(col, emb)?;
            g.add(kept, filled)
        })?;
        let x = encoder.add_positions(&mut g, x, &lengths)?;
        let out = encoder.run_blocks(&mut g, x, &lengths, 0, &top)?;
        let h = out[&top.max()];
        let loss = g.in_scope("pretrain", |g| -> Result<_> {
            let logits = affine(g, &extra, PRETRAIN_HEAD, h)?;
            g.cross_entropy(logits, &labels, Some(&mask))
        })?;
        let value = g.value(loss).item().expect("scalar loss").as_f64();
        if !value.is_finite() {
            return Err(Error::Diverged { step });
        }
        losses.push(value);
        let grads = g.backward(loss)?;
        let lr = if step < cfg.warmup_steps {
            cfg.lr * (step + 1) as f64 / cfg.warmup_steps as f64
        } else {
            cfg.lr
        };
        adam.step(&mut [encoder.params_mut(), &mut extra], &grads, |_| lr)?;
        if (step + 1) % 100 == 0 {
            log::info!("pretrain step {} loss {:.4}", step + 1, window_mean(&losses[losses.len().saturating_sub(100)..]));
        }
    }
    let w = cfg.gate_window.min(losses.len());
    Ok(PretrainOutcome {
        initial_loss: window_mean(&losses[..w]),
        final_loss: window_mean(&losses[losses.len() - w..]),
        losses,
    })
}
