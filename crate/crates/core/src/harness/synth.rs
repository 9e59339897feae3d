//! Synthetic frame-labelling corpus.
//!
//! Each utterance is a chain of symbols in which every symbol usually moves
//! to one of a few preferred successors. A symbol holds for 4 to 8 frames.
//! Every frame is the symbol's low-rank map of a slowly varying latent
//! process, plus an offset fixed for the whole utterance, plus white noise.
//! The maps share a large common part, so a single frame says little about
//! its symbol; the offset has to be estimated from the utterance and
//! removed. Labels are per subsampled frame.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// AR(1) coefficient of the latent process.
const LATENT_SMOOTHING: f64 = 0.9;
/// Standard deviation of the latent process around its mean.
const LATENT_SPREAD: f64 = 0.4;
/// Number of preferred successors of each symbol.
const SUCCESSORS: usize = 2;
/// Probability that a symbol change goes to a preferred successor rather
/// than to any other symbol.
const SUCCESSOR_PROB: f64 = 0.9;
/// Standard deviation of the shared emission entries, relative to `1/sqrt(rank)`.
const SHARED_SCALE: f64 = 0.5;
/// Standard deviation of the symbol-specific emission entries, relative to
/// `1/sqrt(rank)`.
const SYMBOL_SCALE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub vocab: usize,
    pub min_frames_per_symbol: usize,
    pub max_frames_per_symbol: usize,
    pub input_dim: usize,
    pub emission_rank: usize,
    pub noise_std: f64,
    /// Standard deviation of the per-utterance offset added to every frame.
    pub channel_std: f64,
    pub self_transition: f64,
    pub min_symbols: usize,
    pub max_symbols: usize,
    pub pretrain_utterances: usize,
    pub train_utterances: usize,
    pub test_utterances: usize,
    /// Frames per label; must equal the encoder's subsampling factor.
    pub subsampling: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab: 12,
            min_frames_per_symbol: 4,
            max_frames_per_symbol: 8,
            input_dim: 16,
            emission_rank: 4,
            noise_std: 0.3,
            channel_std: 0.5,
            self_transition: 0.1,
            min_symbols: 8,
            max_symbols: 24,
            pretrain_utterances: 2000,
            train_utterances: 1000,
            test_utterances: 200,
            subsampling: 4,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("vocab", self.vocab),
            ("min_frames_per_symbol", self.min_frames_per_symbol),
            ("input_dim", self.input_dim),
            ("emission_rank", self.emission_rank),
            ("min_symbols", self.min_symbols),
            ("subsampling", self.subsampling),
        ] {
            if v == 0 {
                return Err(Error::config(format!("synth.{field}"), "must be positive"));
            }
        }
        if self.vocab < 2 {
            return Err(Error::config("synth.vocab", "need at least 2 symbols"));
        }
        if self.max_frames_per_symbol < self.min_frames_per_symbol {
            return Err(Error::config("synth.max_frames_per_symbol", "smaller than the minimum"));
        }
        if self.max_symbols < self.min_symbols {
            return Err(Error::config("synth.max_symbols", "smaller than the minimum"));
        }
        if self.min_symbols * self.min_frames_per_symbol < self.subsampling {
            return Err(Error::config("synth.min_symbols", "shortest utterance is shorter than one label window"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("synth.noise_std", "must be finite and non-negative"));
        }
        if !(self.channel_std >= 0.0 && self.channel_std.is_finite()) {
            return Err(Error::config("synth.channel_std", "must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.self_transition) {
            return Err(Error::config("synth.self_transition", "must be a probability"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    /// Row-major `(num_frames, input_dim)`.
    pub frames: Vec<f64>,
    pub num_frames: usize,
    /// Symbol of every input frame.
    pub frame_labels: Vec<usize>,
    /// Majority symbol of every subsampling window; `num_frames / subsampling` entries.
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: SynthConfig,
    pub pretrain: Vec<Utterance>,
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

/// Emission model shared by every split of one corpus.
struct World {
    mean: Vec<f64>,
    /// Per symbol, row-major `(input_dim, rank)`: a map common to all
    /// symbols plus a smaller symbol-specific one.
    emissions: Vec<Vec<f64>>,
    /// Per symbol, the other symbols it usually moves to.
    successors: Vec<Vec<usize>>,
}

impl World {
    fn new(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let r = cfg.emission_rank;
        let mean = (0..r).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
        let shared_std = SHARED_SCALE / (r as f64).sqrt();
        let symbol_std = SYMBOL_SCALE / (r as f64).sqrt();
        let shared: Vec<f64> = (0..cfg.input_dim * r)
            .map(|_| shared_std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let emissions = (0..cfg.vocab)
            .map(|_| {
                shared
                    .iter()
                    .map(|a| a + symbol_std * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let branching = SUCCESSORS.min(cfg.vocab - 1);
        let successors = (0..cfg.vocab)
            .map(|s| {
                let mut others: Vec<usize> = (0..cfg.vocab).filter(|&o| o != s).collect();
                others.shuffle(rng);
                others.truncate(branching);
                others
            })
            .collect();
        World {
            mean,
            emissions,
            successors,
        }
    }

    fn utterance(&self, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Utterance {
        let n_symbols = rng.gen_range(cfg.min_symbols..=cfg.max_symbols);
        let mut symbols = Vec::with_capacity(n_symbols);
        let mut current = rng.gen_range(0..cfg.vocab);
        for i in 0..n_symbols {
            if i > 0 && !rng.gen_bool(cfg.self_transition) {
                let next = &self.successors[current];
                current = if rng.gen_bool(SUCCESSOR_PROB) {
                    next[rng.gen_range(0..next.len())]
                } else {
                    let other = rng.gen_range(0..cfg.vocab - 1);
                    if other >= current {
                        other + 1
                    } else {
                        other
                    }
                };
            }
            symbols.push(current);
        }
        let mut frame_labels = Vec::new();
        for &s in &symbols {
            let n = rng.gen_range(cfg.min_frames_per_symbol..=cfg.max_frames_per_symbol);
            frame_labels.extend(std::iter::repeat(s).take(n));
        }
        let (r, dim) = (cfg.emission_rank, cfg.input_dim);
        let innovation = (1.0 - LATENT_SMOOTHING * LATENT_SMOOTHING).sqrt();
        let mut u: Vec<f64> = (0..r).map(|_| rng.sample(StandardNormal)).collect();
        let mut frames = Vec::with_capacity(frame_labels.len() * dim);
        let mut z = vec![0.0; r];
        let offset: Vec<f64> = (0..dim)
            .map(|_| cfg.channel_std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for &s in &frame_labels {
            for k in 0..r {
                let e: f64 = rng.sample(StandardNormal);
                u[k] = LATENT_SMOOTHING * u[k] + innovation * e;
                z[k] = self.mean[k] + LATENT_SPREAD * u[k];
            }
            let a = &self.emissions[s];
            for (row, off) in a.chunks_exact(r).zip(&offset) {
                let clean: f64 = row.iter().zip(&z).map(|(w, zv)| w * zv).sum();
                let noise: f64 = rng.sample(StandardNormal);
                frames.push(clean + off + cfg.noise_std * noise);
            }
        }
        let labels = window_labels(&frame_labels, cfg.subsampling, cfg.vocab);
        Utterance {
            num_frames: frame_labels.len(),
            frames,
            frame_labels,
            labels,
        }
    }
}

/// Majority symbol per non-overlapping window; ties go to the symbol seen
/// first in the window.
pub fn window_labels(frame_labels: &[usize], window: usize, vocab: usize) -> Vec<usize> {
    let mut counts = vec![0usize; vocab];
    frame_labels
        .chunks_exact(window)
        .map(|w| {
            counts.iter_mut().for_each(|c| *c = 0);
            w.iter().for_each(|&s| counts[s] += 1);
            let mut best = w[0];
            for &s in w {
                if counts[s] > counts[best] {
                    best = s;
                }
            }
            best
        })
        .collect()
}

fn split(world: &World, cfg: &SynthConfig, seed: u64, tag: u64, n: usize) -> Vec<Utterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    (0..n).map(|_| world.utterance(cfg, &mut rng)).collect()
}

/// Deterministic in `(cfg, seed)`. The emission model is shared by all
/// splits; each split draws utterances from its own random stream.
pub fn generate_corpus(cfg: &SynthConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = World::new(cfg, &mut rng);
    Ok(Corpus {
        config: cfg.clone(),
        pretrain: split(&world, cfg, seed, 1, cfg.pretrain_utterances),
        train: split(&world, cfg, seed, 2, cfg.train_utterances),
        test: split(&world, cfg, seed, 3, cfg.test_utterances),
    })
}

/// A packed batch of utterances.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// `(sum of frame counts, input_dim)`.
    pub frames: Tensor<T>,
    pub lengths: Vec<usize>,
    /// Concatenated per-window labels.
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

impl<T: Real> Batch<T> {
    pub fn gather(utterances: &[Utterance], indices: &[usize], input_dim: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let mut data = Vec::new();
        let mut lengths = Vec::with_capacity(indices.len());
        let mut labels = Vec::new();
        for &i in indices {
            let u = utterances
                .get(i)
                .ok_or_else(|| Error::Invalid(format!("utterance {i} out of range")))?;
            data.extend(u.frames.iter().map(|&v| T::from_f64_lossy(v)));
            lengths.push(u.num_frames);
            labels.extend_from_slice(&u.labels);
        }
        let rows = lengths.iter().sum();
        Ok(Batch {
            frames: Tensor::new(vec![rows, input_dim], data)?,
            lengths,
            labels,
            indices: indices.to_vec(),
        })
    }
}

/// Endless shuffled passes over `0..n`.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        EpochSampler { order, pos: 0, rng }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            pretrain_utterances: 3,
            train_utterances: 5,
            test_utterances: 4,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_and_split_disjoint() {
        let a = generate_corpus(&small(), 7).unwrap();
        let b = generate_corpus(&small(), 7).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&small(), 8).unwrap();
        assert_ne!(a.train, c.train);
        assert_ne!(a.train[0].frames, a.test[0].frames);
    }

    #[test]
    fn label_lengths_follow_floor() {
        let c = generate_corpus(&small(), 1).unwrap();
        for u in c.train.iter().chain(&c.test) {
            assert_eq!(u.labels.len(), u.num_frames / 4);
            assert_eq!(u.frames.len(), u.num_frames * 16);
            assert!(u.num_frames >= 8 * 4 && u.num_frames <= 24 * 8);
        }
    }

    #[test]
    fn majority_with_first_seen_tiebreak() {
        assert_eq!(window_labels(&[1, 1, 2, 2, 3, 3, 3, 0, 5], 4, 6), vec![1, 3]);
        assert_eq!(window_labels(&[2, 1, 1, 2], 4, 3), vec![2]);
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = EpochSampler::new(10, 0);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_batch(2)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}
