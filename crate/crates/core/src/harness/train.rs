use std::io::Write;
use std::time::Instant;

use super::model::{FrozenCache, Model};
use super::optim::{Adam, Ema};
use super::synth::{Batch, EpochSampler, Utterance};
use crate::error::{Error, Result};
use crate::tensor::{GradientMap, Graph, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Learning rate of parameters created for the downstream task: heads,
    /// classifier and adapters.
    pub lr: f64,
    /// Learning rate of pretrained encoder parameters.
    pub encoder_lr: f64,
    pub warmup_steps: usize,
    pub ema_decay: f64,
    pub seed: u64,
    /// Steps between two metrics records.
    pub log_every: usize,
    pub eval_batch_size: usize,
    /// Precompute outputs of the frozen part of the encoder once.
    pub cache_frozen_features: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 16,
            lr: 1e-3,
            encoder_lr: 1e-4,
            warmup_steps: 500,
            ema_decay: 0.9999,
            seed: 0,
            log_every: 50,
            eval_batch_size: 64,
            cache_frozen_features: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("steps", self.steps),
            ("batch_size", self.batch_size),
            ("log_every", self.log_every),
            ("eval_batch_size", self.eval_batch_size),
        ] {
            if v == 0 {
                return Err(Error::config(format!("train.{field}"), "must be positive"));
            }
        }
        for (field, v) in [("lr", self.lr), ("encoder_lr", self.encoder_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("train.{field}"), format!("must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config("train.ema_decay", format!("must be in [0, 1), got {}", self.ema_decay)));
        }
        Ok(())
    }

    /// Linear warmup to `base`, then constant.
    pub fn lr_at(&self, base: f64, step: usize) -> f64 {
        if step < self.warmup_steps {
            base * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            base
        }
    }
}

/// Whether `name` belongs to the pretrained encoder rather than to a module
/// added for the downstream task.
pub fn is_pretrained_param(name: &str) -> bool {
    name.starts_with("encoder/") && !name.contains("/adapter/")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub step: usize,
    /// Mean training loss since the previous record.
    pub loss: f64,
    /// Training-batch frame error rate since the previous record.
    pub frame_error_rate: f64,
    pub examples_per_sec: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<Metrics>,
    /// Test FER with EMA weights.
    pub test_fer: f64,
}

/// Number of rows whose argmax differs from the label.
fn count_errors<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) != y)
        .count()
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Frame error rate of `predictions` against `labels`.
pub fn frame_error_rate(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() || predictions.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let wrong = predictions.iter().zip(labels).filter(|(p, l)| p != l).count();
    Ok(wrong as f64 / labels.len() as f64)
}

/// Per-frame argmax predictions over `utterances`.
pub fn predict<T: Real>(model: &Model<T>, utterances: &[Utterance], batch_size: usize) -> Result<Vec<usize>> {
    let all: Vec<usize> = (0..utterances.len()).collect();
    let mut out = Vec::new();
    for idx in all.chunks(batch_size.max(1)) {
        let batch = Batch::<T>::gather(utterances, idx, model.encoder.config().input_dim)?;
        let mut g = Graph::inference();
        let logits = model.logits(&mut g, &batch)?;
        let value = g.value(logits);
        let classes = value.shape()[1];
        out.extend(value.data().chunks_exact(classes).map(argmax));
    }
    Ok(out)
}

/// Frame error rate of `model` on `utterances`. Does not modify the model.
pub fn evaluate_fer<T: Real>(model: &Model<T>, utterances: &[Utterance], batch_size: usize) -> Result<f64> {
    if utterances.is_empty() {
        return Err(Error::Invalid("cannot evaluate on an empty dataset".into()));
    }
    let predictions = predict(model, utterances, batch_size)?;
    let labels: Vec<usize> = utterances.iter().flat_map(|u| u.labels.iter().copied()).collect();
    frame_error_rate(&predictions, &labels)
}

/// Trains the trainable parameters of `model` on `train` and evaluates the
/// EMA weights on `test`. On return `model` holds the EMA weights.
pub fn train_downstream<T: Real>(
    model: &mut Model<T>,
    train: &[Utterance],
    test: &[Utterance],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.trainable_elements() == 0 {
        return Err(Error::NothingToTrain("every parameter is frozen".into()));
    }
    if train.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let cache = if cfg.cache_frozen_features {
        FrozenCache::build(model, train, cfg.eval_batch_size)?
    } else {
        None
    };
    let mut sampler = EpochSampler::new(train.len(), cfg.seed ^ 0x7a11);
    let mut adam = Adam::new();
    let mut ema = Ema::new(cfg.ema_decay, &model.stores())?;
    let input_dim = model.encoder.config().input_dim;
    let mut history = Vec::new();
    let (mut loss_sum, mut errors, mut frames, mut examples) = (0.0, 0usize, 0usize, 0usize);
    let mut window_start = Instant::now();
    let mut window_steps = 0usize;
    for step in 0..cfg.steps {
        let idx = sampler.next_batch(cfg.batch_size);
        let batch = Batch::<T>::gather(train, &idx, input_dim)?;
        let mut g = Graph::new();
        let (logits, loss) = model.forward_train(&mut g, cache.as_ref(), &batch)?;
        let loss_value = g.value(loss).item().expect("scalar loss").as_f64();
        if !loss_value.is_finite() {
            return Err(Error::Diverged { step });
        }
        errors += count_errors(g.value(logits), &batch.labels);
        let grads = g.backward(loss)?;
        let (lr, encoder_lr) = (cfg.lr_at(cfg.lr, step), cfg.lr_at(cfg.encoder_lr, step));
        adam.step(&mut model.stores_mut(), &grads, |name| {
            if is_pretrained_param(name) {
                encoder_lr
            } else {
                lr
            }
        })?;
        ema.update(&model.stores())?;
        loss_sum += loss_value;
        frames += batch.labels.len();
        examples += idx.len();
        window_steps += 1;
        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps {
            let secs = window_start.elapsed().as_secs_f64().max(1e-9);
            history.push(Metrics {
                step: step + 1,
                loss: loss_sum / window_steps as f64,
                frame_error_rate: errors as f64 / frames.max(1) as f64,
                examples_per_sec: examples as f64 / secs,
            });
            log::debug!("step {} loss {:.4}", step + 1, loss_sum / window_steps as f64);
            (loss_sum, errors, frames, examples, window_steps) = (0.0, 0, 0, 0, 0);
            window_start = Instant::now();
        }
    }
    ema.apply(&mut model.stores_mut());
    let test_fer = evaluate_fer(model, test, cfg.eval_batch_size)?;
    Ok(TrainOutcome { history, test_fer })
}

/// One training step without optimizer state, for throughput measurement.
/// Returns the batch size.
pub fn timed_step<T: Real>(model: &mut Model<T>, adam: &mut Adam<T>, batch: &Batch<T>, lr: f64) -> Result<usize> {
    let mut g = Graph::new();
    let loss = model.loss(&mut g, batch)?;
    let grads = g.backward(loss)?;
    adam.step(&mut model.stores_mut(), &grads, |_| lr)?;
    Ok(batch.lengths.len())
}

pub fn write_metrics_csv<W: Write>(out: W, history: &[Metrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "loss", "fer", "examples_per_sec"])?;
    for m in history {
        w.write_record([
            m.step.to_string(),
            format!("{:.6}", m.loss),
            format!("{:.6}", m.frame_error_rate),
            format!("{:.2}", m.examples_per_sec),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Gradient keys that belong to the encoder.
pub fn encoder_gradient_keys<T: Real>(grads: &GradientMap<T>) -> Vec<String> {
    grads.keys().filter(|k| k.starts_with("encoder/")).cloned().collect()
}
