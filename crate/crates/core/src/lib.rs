//! Streaming video anomaly prediction, detection and analysis on a desk-scale
//! substrate: frozen vision encoder, spatio-temporal relation distillation,
//! a LoRA-adapted stream language model and an EOS-gated response scheduler.

pub mod attention;
pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod optim;
pub mod lm;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod scheduler;
pub mod strd;
pub mod synth;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
