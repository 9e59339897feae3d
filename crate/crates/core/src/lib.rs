//! Transfer learning from a frozen conformer encoder: fusion heads over
//! intermediate layers, parameter-efficient fine-tuning baselines, and the
//! accounting needed to compare their cost.

pub mod accounting;
pub mod config;
pub mod encoder;
pub mod error;
pub mod experiments;
pub mod fusion;
pub mod harness;
mod layers;
pub mod peft;
pub mod tensor;

pub use error::{Error, Result};
pub use layers::affine_params;
