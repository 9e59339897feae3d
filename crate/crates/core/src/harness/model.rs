//! Encoder, fusion head and frame classifier trained together.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::synth::{Batch, Utterance};
use crate::encoder::{Encoder, FeatureTaps, TapSet};
use crate::error::{Error, Result};
use crate::fusion::{FusionHead, FusionSpec};
use crate::layers::{affine, init_affine};
use crate::peft::lowest_trainable_depth;
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

pub const CLASSIFIER_PREFIX: &str = "classifier";

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub encoder: Encoder<T>,
    pub head: FusionHead<T>,
    pub classifier: ParamStore<T>,
    num_classes: usize,
    taps: TapSet,
}

impl<T: Real> Model<T> {
    /// Attaches a new head and classifier to an already configured encoder.
    pub fn new(encoder: Encoder<T>, fusion: FusionSpec, num_classes: usize, seed: u64) -> Result<Self> {
        let cfg = *encoder.config();
        let head = FusionHead::build(fusion, &cfg, seed ^ 0x4ead)?;
        let taps = head.spec().tap_set(cfg.num_layers)?;
        let mut classifier = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc1a5);
        init_affine(&mut classifier, CLASSIFIER_PREFIX, head.output_dim(), num_classes, &mut rng)?;
        Ok(Model {
            encoder,
            head,
            classifier,
            num_classes,
            taps,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn taps(&self) -> &TapSet {
        &self.taps
    }

    pub fn stores(&self) -> [&ParamStore<T>; 3] {
        [self.encoder.params(), self.head.params(), &self.classifier]
    }

    pub fn stores_mut(&mut self) -> [&mut ParamStore<T>; 3] {
        [self.encoder.params_mut(), self.head.params_mut(), &mut self.classifier]
    }

    pub fn trainable_elements(&self) -> usize {
        self.stores().iter().map(|s| s.trainable_elements()).sum()
    }

    pub fn logits_from_taps(&self, g: &mut Graph<T>, taps: &FeatureTaps) -> Result<Var> {
        let h = self.head.forward(g, taps)?;
        g.in_scope(CLASSIFIER_PREFIX, |g| affine(g, &self.classifier, CLASSIFIER_PREFIX, h))
    }

    pub fn logits(&self, g: &mut Graph<T>, batch: &Batch<T>) -> Result<Var> {
        let taps = self.encoder.encode_with_taps(g, &batch.frames, &batch.lengths, &self.taps)?;
        self.logits_from_taps(g, &taps)
    }

    /// Logits and mean cross-entropy of `batch`. Frozen features are read
    /// from `cache` when given.
    pub fn forward_train(&self, g: &mut Graph<T>, cache: Option<&FrozenCache<T>>, batch: &Batch<T>) -> Result<(Var, Var)> {
        let taps = match cache {
            Some(c) => self.cached_taps(g, c, batch)?,
            None => self.encoder.encode_with_taps(g, &batch.frames, &batch.lengths, &self.taps)?,
        };
        let logits = self.logits_from_taps(g, &taps)?;
        let loss = g.in_scope(CLASSIFIER_PREFIX, |g| g.cross_entropy(logits, &batch.labels, None))?;
        Ok((logits, loss))
    }

    pub fn loss(&self, g: &mut Graph<T>, batch: &Batch<T>) -> Result<Var> {
        Ok(self.forward_train(g, None, batch)?.1)
    }

    fn cached_taps(&self, g: &mut Graph<T>, cache: &FrozenCache<T>, batch: &Batch<T>) -> Result<FeatureTaps> {
        let lengths = self.encoder.output_lengths(&batch.lengths)?;
        let mut taps = BTreeMap::new();
        for (&layer, rows) in &cache.taps {
            taps.insert(layer, g.constant(cache.gather(rows, &batch.indices)?));
        }
        if cache.start <= self.taps.max() {
            let x = g.constant(cache.gather(&cache.input, &batch.indices)?);
            taps.extend(self.encoder.run_blocks(g, x, &lengths, cache.start, &self.taps)?);
        }
        Ok(FeatureTaps::new(taps, lengths))
    }
}

/// Per-utterance outputs of the frozen part of the encoder: taps below the
/// first trainable block and the input of that block.
#[derive(Clone, Debug)]
pub struct FrozenCache<T> {
    /// First block that is run live.
    pub start: usize,
    taps: BTreeMap<usize, Vec<Tensor<T>>>,
    input: Vec<Tensor<T>>,
}

impl<T: Real> FrozenCache<T> {
    /// `None` when nothing below the head is frozen (trainable frontend or
    /// block 0), in which case there is nothing to cache.
    pub fn build(model: &Model<T>, utterances: &[Utterance], chunk: usize) -> Result<Option<Self>> {
        let enc = &model.encoder;
        if enc.frontend_trainable() {
            return Ok(None);
        }
        let max = model.taps.max();
        let start = lowest_trainable_depth(enc).map_or(max + 1, |l| l.min(max + 1));
        let below: Vec<usize> = model.taps.indices().iter().copied().filter(|&l| l < start).collect();
        let d = enc.config().model_dim;
        let mut taps: BTreeMap<usize, Vec<Tensor<T>>> = below.iter().map(|&l| (l, Vec::new())).collect();
        let mut input = Vec::new();
        let all: Vec<usize> = (0..utterances.len()).collect();
        for idx in all.chunks(chunk.max(1)) {
            let batch = Batch::<T>::gather(utterances, idx, enc.config().input_dim)?;
            let mut g = Graph::inference();
            let (x, lengths) = enc.subsample_frontend(&mut g, &batch.frames, &batch.lengths)?;
            let mut x = enc.add_positions(&mut g, x, &lengths)?;
            let mut outputs: BTreeMap<usize, Var> = BTreeMap::new();
            for layer in 0..start.min(max + 1) {
                x = enc.block_forward(&mut g, layer, x, &lengths)?;
                if below.contains(&layer) {
                    outputs.insert(layer, x);
                }
            }
            for (layer, v) in outputs {
                taps.get_mut(&layer).expect("seeded").extend(split_rows(g.value(v), &lengths, d));
            }
            if start <= max {
                input.extend(split_rows(g.value(x), &lengths, d));
            }
        }
        Ok(Some(FrozenCache { start, taps, input }))
    }

    fn gather(&self, rows: &[Tensor<T>], indices: &[usize]) -> Result<Tensor<T>> {
        let parts = indices
            .iter()
            .map(|&i| rows.get(i).ok_or_else(|| Error::Invalid(format!("utterance {i} not cached"))))
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat_rows(&parts)
    }
}

fn split_rows<T: Real>(t: &Tensor<T>, lengths: &[usize], d: usize) -> Vec<Tensor<T>> {
    let mut start = 0;
    lengths
        .iter()
        .map(|&len| {
            let part = Tensor::from_parts(vec![len, d], t.data()[start * d..(start + len) * d].to_vec());
            start += len;
            part
        })
        .collect()
}
