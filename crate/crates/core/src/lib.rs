//! RGB-thermal glass segmentation.
//!
//! * [`datakit`] loads and synthesizes aligned RGB-T samples and computes mask statistics.
//! * [`nnet`] is the dual-encoder network with the transformer fusion bridge and attention decoder.
//! * [`metrics`] implements the with-glass / without-glass evaluation protocol.
//! * [`trainer`] drives optimization, checkpointing, evaluation and ablations.
//! * [`apps`] holds glass-plane depth correction and glass masking for downstream segmenters.

pub mod apps;
pub mod datakit;
pub mod error;
pub mod metrics;
pub mod nnet;
pub mod trainer;

pub use error::{GlassError, Result};
