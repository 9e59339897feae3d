//! The frozen foundation model: a convolutional subsampling frontend and a
//! stack of conformer blocks exposing per-layer output taps.

mod block;
mod checkpoint;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::error::{Error, Result};
use crate::layers::{affine, init_affine};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

/// Kernel width of both frontend convolutions.
pub const FRONTEND_KERNEL: usize = 3;
/// Stride of each frontend convolution.
pub const FRONTEND_STRIDE: usize = 2;
/// Left padding of each frontend convolution. With no right padding the
/// output length is `floor(len / 2)`.
pub const FRONTEND_PAD: (usize, usize) = (1, 0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_expansion: usize,
    pub conv_kernel: usize,
    pub frontend_subsampling: usize,
    pub input_dim: usize,
}

impl EncoderConfig {
    /// Six-block model small enough to train on a desktop CPU.
    pub fn desk() -> Self {
        EncoderConfig {
            num_layers: 6,
            model_dim: 64,
            num_heads: 4,
            ffn_expansion: 4,
            conv_kernel: 8,
            frontend_subsampling: 4,
            input_dim: 16,
        }
    }

    /// The 24-layer, 1024-wide model. Used for parameter counting only; head
    /// count, kernel width and FFN expansion are conventional guesses.
    pub fn large() -> Self {
        EncoderConfig {
            num_layers: 24,
            model_dim: 1024,
            num_heads: 8,
            ffn_expansion: 4,
            conv_kernel: 32,
            frontend_subsampling: 4,
            input_dim: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("ffn_expansion", self.ffn_expansion),
            ("conv_kernel", self.conv_kernel),
            ("frontend_subsampling", self.frontend_subsampling),
            ("input_dim", self.input_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::config(
                "num_heads",
                format!("{} does not divide model_dim {}", self.num_heads, self.model_dim),
            ));
        }
        if self.frontend_subsampling != FRONTEND_STRIDE * FRONTEND_STRIDE {
            return Err(Error::config(
                "frontend_subsampling",
                format!(
                    "the two-layer frontend subsamples by exactly {}, got {}",
                    FRONTEND_STRIDE * FRONTEND_STRIDE,
                    self.frontend_subsampling
                ),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// Frames after the frontend: `floor(len / subsampling)`, or `None`
    /// when the sequence is shorter than the subsampling factor.
    pub fn output_len(&self, input_len: usize) -> Option<usize> {
        let once = input_len / FRONTEND_STRIDE;
        let twice = once / FRONTEND_STRIDE;
        (twice > 0).then_some(twice)
    }
}

/// Strictly increasing, non-empty list of 0-based block indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TapSet(Vec<usize>);

impl TapSet {
    pub fn new(indices: Vec<usize>, num_layers: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::config("taps", "tap set is empty"));
        }
        if let Some(w) = indices.windows(2).find(|w| w[0] >= w[1]) {
            let reason = if w[0] == w[1] {
                format!("duplicate tap index {}", w[0])
            } else {
                format!("indices must be increasing ({} before {})", w[0], w[1])
            };
            return Err(Error::config("taps", reason));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= num_layers) {
            return Err(Error::config(
                "taps",
                format!("tap index {bad} out of range for {num_layers} layers"),
            ));
        }
        Ok(TapSet(indices))
    }

    /// The output of the highest block only.
    pub fn top(num_layers: usize) -> Self {
        TapSet(vec![num_layers - 1])
    }

    pub fn all(num_layers: usize) -> Self {
        TapSet((0..num_layers).collect())
    }

    /// `n` taps spread over the stack, always ending at the top block.
    pub fn evenly_spaced(n: usize, num_layers: usize) -> Result<Self> {
        if n == 0 || n > num_layers {
            return Err(Error::config("taps", format!("cannot pick {n} of {num_layers} layers")));
        }
        let step = num_layers as f64 / n as f64;
        let idx = (1..=n)
            .map(|i| ((i as f64 * step).round() as usize).clamp(1, num_layers) - 1)
            .collect();
        Self::new(idx, num_layers)
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> usize {
        *self.0.last().expect("non-empty")
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.0.binary_search(&layer).is_ok()
    }
}

impl fmt::Display for TapSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|i| i.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

/// Outputs of the requested blocks, all of shape `(rows, model_dim)` where
/// rows is the packed subsampled length of the batch.
#[derive(Clone, Debug)]
pub struct FeatureTaps {
    taps: BTreeMap<usize, Var>,
    lengths: Vec<usize>,
}

impl FeatureTaps {
    pub fn new(taps: BTreeMap<usize, Var>, lengths: Vec<usize>) -> Self {
        FeatureTaps { taps, lengths }
    }

    pub fn get(&self, layer: usize) -> Result<Var> {
        self.taps
            .get(&layer)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("layer {layer} was not tapped")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.taps.iter().map(|(&k, &v)| (k, v))
    }

    pub fn layers(&self) -> Vec<usize> {
        self.taps.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// Per-utterance lengths of the packed rows.
    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }
}

pub(crate) fn layer_prefix(layer: usize) -> String {
    format!("encoder/layer_{layer}")
}

/// Block index encoded in a parameter name, if any.
pub(crate) fn layer_of(name: &str) -> Option<usize> {
    name.strip_prefix("encoder/layer_")?
        .split('/')
        .next()?
        .parse()
        .ok()
}

/// A conformer encoder and its parameters (`encoder/...`).
#[derive(Clone, Debug)]
pub struct Encoder<T> {
    config: EncoderConfig,
    params: ParamStore<T>,
    /// Block index → adapter bottleneck width.
    adapters: BTreeMap<usize, usize>,
}

impl<T: Real> Encoder<T> {
    /// Randomly initialized encoder; every parameter starts trainable.
    pub fn build(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (d, c_in) = (config.model_dim, config.input_dim);
        for (name, cin) in [("conv1", c_in), ("conv2", d)] {
            let std = 1.0 / ((FRONTEND_KERNEL * cin) as f64).sqrt();
            params.insert(
                format!("encoder/frontend/{name}/weight"),
                Tensor::randn(&[FRONTEND_KERNEL, cin, d], std, &mut rng),
            )?;
            params.insert(format!("encoder/frontend/{name}/bias"), Tensor::zeros(&[d]))?;
        }
        init_affine(&mut params, "encoder/frontend/proj", d, d, &mut rng)?;
        for layer in 0..config.num_layers {
            block::init_block(&mut params, &config, &layer_prefix(layer), &mut rng)?;
        }
        Ok(Encoder {
            config,
            params,
            adapters: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Block index → bottleneck width of every inserted adapter.
    pub fn adapters(&self) -> &BTreeMap<usize, usize> {
        &self.adapters
    }

    pub(crate) fn register_adapter(&mut self, layer: usize, bottleneck: usize) {
        self.adapters.insert(layer, bottleneck);
    }

    /// Blocks owning at least one trainable parameter (adapters count as
    /// part of the block they follow).
    pub fn trainable_layers(&self) -> BTreeSet<usize> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .filter_map(|p| layer_of(&p.name))
            .collect()
    }

    pub fn frontend_trainable(&self) -> bool {
        self.params
            .iter()
            .any(|p| p.trainable && p.name.starts_with("encoder/frontend/"))
    }

    /// Checks per-utterance lengths against the frontend's receptive field
    /// and returns the subsampled lengths.
    pub fn output_lengths(&self, lengths: &[usize]) -> Result<Vec<usize>> {
        if lengths.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        lengths
            .iter()
            .map(|&len| {
                self.config.output_len(len).ok_or_else(|| {
                    Error::Invalid(format!(
                        "sequence of {len} frames is shorter than the frontend receptive field ({} frames)",
                        self.config.frontend_subsampling
                    ))
                })
            })
            .collect()
    }

    /// Two stride-2 convolutions with swish, then a linear projection.
    /// `frames` packs the utterances of `lengths` along rows.
    pub fn subsample_frontend(&self, g: &mut Graph<T>, frames: &Tensor<T>, lengths: &[usize]) -> Result<(Var, Vec<usize>)> {
        let out_lengths = self.output_lengths(lengths)?;
        let total: usize = lengths.iter().sum();
        if frames.dims2() != Some((total, self.config.input_dim)) {
            return Err(Error::Invalid(format!(
                "frames {:?} do not match ({total}, {})",
                frames.shape(),
                self.config.input_dim
            )));
        }
        let x = g.constant(frames.clone());
        g.in_scope("encoder/frontend", |g| {
            let s = &self.params;
            let mut x = x;
            let mut seg = lengths.to_vec();
            for name in ["conv1", "conv2"] {
                let w = g.param(s, &format!("encoder/frontend/{name}/weight"))?;
                let b = g.param(s, &format!("encoder/frontend/{name}/bias"))?;
                x = g.conv1d(x, w, FRONTEND_STRIDE, FRONTEND_PAD, &seg)?;
                x = g.bias_add(x, b)?;
                x = g.swish(x)?;
                seg = seg.iter().map(|l| l / FRONTEND_STRIDE).collect();
            }
            debug_assert_eq!(seg, out_lengths);
            let x = affine(g, s, "encoder/frontend/proj", x)?;
            Ok((x, out_lengths))
        })
    }

    /// Scales by `sqrt(model_dim)` and adds sinusoidal absolute positions,
    /// restarting at each utterance.
    pub fn add_positions(&self, g: &mut Graph<T>, x: Var, lengths: &[usize]) -> Result<Var> {
        let d = self.config.model_dim;
        let pe = sinusoidal_positions::<T>(lengths, d);
        g.in_scope("encoder/frontend", |g| {
            let x = g.scale(x, (d as f64).sqrt())?;
            let pe = g.constant(pe);
            g.add(x, pe)
        })
    }

    /// One conformer block followed by its adapter, if any.
    pub fn block_forward(&self, g: &mut Graph<T>, layer: usize, x: Var, lengths: &[usize]) -> Result<Var> {
        let prefix = layer_prefix(layer);
        let y = g.in_scope(&prefix, |g| block::forward(g, &self.params, &self.config, &prefix, x, lengths))?;
        if self.adapters.contains_key(&layer) {
            let scope = format!("{prefix}/adapter");
            g.in_scope(&scope, |g| crate::peft::adapter_forward(g, &self.params, &scope, y))
        } else {
            Ok(y)
        }
    }

    /// Runs blocks `start..=taps.max()` on `x` (the input of block `start`)
    /// and collects the tapped outputs at or above `start`.
    pub fn run_blocks(
        &self,
        g: &mut Graph<T>,
        mut x: Var,
        lengths: &[usize],
        start: usize,
        taps: &TapSet,
    ) -> Result<BTreeMap<usize, Var>> {
        self.check_taps(taps)?;
        let mut out = BTreeMap::new();
        for layer in start..=taps.max() {
            x = self.block_forward(g, layer, x, lengths)?;
            if taps.contains(layer) {
                out.insert(layer, x);
            }
        }
        Ok(out)
    }

    pub fn check_taps(&self, taps: &TapSet) -> Result<()> {
        if taps.max() >= self.config.num_layers {
            return Err(Error::config(
                "taps",
                format!("tap {} out of range for {} layers", taps.max(), self.config.num_layers),
            ));
        }
        Ok(())
    }

    /// Frontend plus every block up to the highest tap; blocks above it are
    /// never executed.
    pub fn encode_with_taps(&self, g: &mut Graph<T>, frames: &Tensor<T>, lengths: &[usize], taps: &TapSet) -> Result<FeatureTaps> {
        self.check_taps(taps)?;
        let (x, out_lengths) = self.subsample_frontend(g, frames, lengths)?;
        let x = self.add_positions(g, x, &out_lengths)?;
        let taps = self.run_blocks(g, x, &out_lengths, 0, taps)?;
        Ok(FeatureTaps::new(taps, out_lengths))
    }

    /// Writes every encoder parameter (adapters included) to `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.params)
    }

    /// Rebuilds an encoder for `config` and fills it from a checkpoint.
    /// Adapters present in the file are re-inserted.
    pub fn load(config: EncoderConfig, path: &Path) -> Result<Self> {
        let entries = read_checkpoint(path)?;
        let mut enc = Self::build(config, 0)?;
        for entry in &entries {
            if let Some(rest) = entry.name.strip_suffix("/adapter/down/weight") {
                let layer = layer_of(&entry.name)
                    .filter(|&l| layer_prefix(l) == rest)
                    .ok_or_else(|| Error::Checkpoint(format!("unexpected adapter tensor `{}`", entry.name)))?;
                let bottleneck = *entry.dims.get(1).ok_or_else(|| {
                    Error::Checkpoint(format!("adapter tensor `{}` is not rank 2", entry.name))
                })? as usize;
                crate::peft::insert_adapter(&mut enc, layer, bottleneck, 0)?;
            }
        }
        if entries.len() != enc.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, encoder expects {}",
                entries.len(),
                enc.params.len()
            )));
        }
        for entry in entries {
            let param = enc
                .params
                .get_mut(&entry.name)
                .map_err(|_| Error::Checkpoint(format!("unexpected tensor `{}`", entry.name)))?;
            let value = entry.to_tensor::<T>()?;
            if value.shape() != param.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{}` has shape {:?}, expected {:?}",
                    entry.name,
                    value.shape(),
                    param.value.shape()
                )));
            }
            param.value = value;
        }
        enc.params.iter_mut().for_each(|p| p.trainable = true);
        Ok(enc)
    }
}

/// `pe[t, 2i] = sin(t / 10000^(2i/d))`, `pe[t, 2i+1] = cos(...)`, with `t`
/// restarting at every utterance.
pub fn sinusoidal_positions<T: Real>(lengths: &[usize], dim: usize) -> Tensor<T> {
    let rows: usize = lengths.iter().sum();
    let mut data = Vec::with_capacity(rows * dim);
    for &len in lengths {
        for t in 0..len {
            for j in 0..dim {
                let pair = (j / 2) as f64;
                let angle = t as f64 / 10000f64.powf(2.0 * pair / dim as f64);
                let v = if j % 2 == 0 { angle.sin() } else { angle.cos() };
                data.push(T::from_f64_lossy(v));
            }
        }
    }
    Tensor::from_parts(vec![rows, dim], data)
}
