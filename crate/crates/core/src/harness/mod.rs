//! Synthetic corpus, pretraining, downstream training and evaluation.

mod model;
mod optim;
mod pretrain;
mod synth;
mod train;

pub use model::{FrozenCache, Model, CLASSIFIER_PREFIX};
pub use optim::{ema_update, Adam, Ema};
pub use pretrain::{pretrain_masked_prediction, span_mask, PretrainConfig, PretrainOutcome, Quantizer, MASK_EMBEDDING, PRETRAIN_HEAD};
pub use synth::{generate_corpus, window_labels, Batch, Corpus, EpochSampler, SynthConfig, Utterance};
pub use train::{
    encoder_gradient_keys, evaluate_fer, frame_error_rate, is_pretrained_param, predict, timed_step, train_downstream, write_metrics_csv,
    Metrics, TrainConfig, TrainOutcome,
};
