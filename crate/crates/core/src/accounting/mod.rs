//! Closed-form parameter counts, an analytic tracer for per-step FLOPs and
//! retained activations, reference counts for the 24-layer model, and
//! throughput measurement.

mod reference;
mod report;
mod trace;

pub use reference::{paper_count_rows, CountRow};
pub use report::{
    environment_descriptor, measure_throughput, render_table, write_reports_csv, ResourceReport, Throughput,
    BYTES_PER_ELEMENT, FLOP_CONVENTION, OPTIMIZER_BYTES_PER_PARAM,
};
pub use trace::{trace_train_step, StepSpec};

use crate::encoder::{EncoderConfig, FRONTEND_KERNEL};
use crate::error::Result;
use crate::fusion::{head_params, FusionSpec};
use crate::layers::affine_params;
use crate::peft::{adapter_params, PeftSpec};

pub fn frontend_params(cfg: &EncoderConfig) -> usize {
    let d = cfg.model_dim;
    FRONTEND_KERNEL * cfg.input_dim * d + d + FRONTEND_KERNEL * d * d + d + affine_params(d, d)
}

pub fn block_params(cfg: &EncoderConfig) -> usize {
    let d = cfg.model_dim;
    let hidden = d * cfg.ffn_expansion;
    let norm = 2 * d;
    let ffn = norm + affine_params(d, hidden) + affine_params(hidden, d);
    let mhsa = norm + 4 * affine_params(d, d);
    let conv = norm + affine_params(d, 2 * d) + cfg.conv_kernel * d + d + norm + affine_params(d, d);
    2 * ffn + mhsa + conv + norm
}

/// Bias vectors and layer-norm offsets of one block.
pub fn block_bias_params(cfg: &EncoderConfig) -> usize {
    let d = cfg.model_dim;
    let hidden = d * cfg.ffn_expansion;
    let ffn = d + hidden + d;
    let mhsa = d + 4 * d;
    let conv = d + 2 * d + d + d + d;
    2 * ffn + mhsa + conv + d
}

pub fn frontend_bias_params(cfg: &EncoderConfig) -> usize {
    3 * cfg.model_dim
}

/// Encoder parameters without adapters.
pub fn encoder_params(cfg: &EncoderConfig) -> usize {
    frontend_params(cfg) + cfg.num_layers * block_params(cfg)
}

pub fn classifier_params(input_dim: usize, num_classes: usize) -> usize {
    affine_params(input_dim, num_classes)
}

/// Trainable and total parameter counts split by owner.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamCounts {
    pub encoder_trainable: usize,
    /// Every encoder parameter including inserted adapters.
    pub encoder_total: usize,
    /// Fusion head only; the frame classifier is counted separately.
    pub head_trainable: usize,
}

impl ParamCounts {
    pub fn encoder_frozen(&self) -> usize {
        self.encoder_total - self.encoder_trainable
    }
}

/// Closed-form counts; no tensors are allocated.
pub fn count_trainable_params(
    cfg: &EncoderConfig,
    fusion: Option<&FusionSpec>,
    peft: Option<&PeftSpec>,
) -> Result<ParamCounts> {
    cfg.validate()?;
    if let Some(f) = fusion {
        f.validate(cfg)?;
    }
    let base = encoder_params(cfg);
    let (encoder_trainable, adapters) = match peft.unwrap_or(&PeftSpec::None) {
        PeftSpec::None => (0, 0),
        PeftSpec::Full => (base, 0),
        PeftSpec::Fths => (block_params(cfg), 0),
        PeftSpec::BitFit => (cfg.num_layers * block_bias_params(cfg) + frontend_bias_params(cfg), 0),
        spec @ PeftSpec::Adapter { layers, bottleneck } => {
            spec.validate(cfg)?;
            let n = layers.resolve(cfg.num_layers)?.len() * adapter_params(cfg.model_dim, *bottleneck);
            (n, n)
        }
    };
    Ok(ParamCounts {
        encoder_trainable,
        encoder_total: base + adapters,
        head_trainable: fusion.map_or(0, |f| head_params(f, cfg.model_dim)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_count_closed_form() {
        // 23 d^2 + k d + 30 d for expansion 4
        for cfg in [EncoderConfig::desk(), EncoderConfig::large()] {
            let d = cfg.model_dim;
            assert_eq!(block_params(&cfg), 23 * d * d + cfg.conv_kernel * d + 30 * d);
            assert_eq!(block_bias_params(&cfg), 24 * d);
        }
        assert_eq!(block_params(&EncoderConfig::desk()), 96_640);
        assert_eq!(frontend_params(&EncoderConfig::desk()), 19_648);
        assert_eq!(encoder_params(&EncoderConfig::desk()), 599_488);
    }

    #[test]
    fn nothing_trainable_without_specs() {
        let c = count_trainable_params(&EncoderConfig::large(), None, None).unwrap();
        assert_eq!((c.encoder_trainable, c.head_trainable), (0, 0));
        assert_eq!(c.encoder_frozen(), encoder_params(&EncoderConfig::large()));
    }
}
