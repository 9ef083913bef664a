//! Self-training as pre-training for small character-level transformer
//! encoders: domain MLM pre-training, fine-tuning, pseudo-labelling,
//! task-specific pre-training on pseudo-labels and a final fine-tune, plus
//! the classic self-training baseline and an ablation harness.

pub mod autodiff;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod framework;
pub mod metrics;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod report;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
