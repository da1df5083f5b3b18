//! Segmentation network: backbones, positional encoding, transformer fusion,
//! attention decoder and checkpoints.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod feature;
pub mod fusion;
pub mod im2col;
pub mod layers;
pub mod mfm;
pub mod model;
pub mod params;
pub mod posenc;
pub mod transformer;

pub use candle_core::{DType, Device};
pub use checkpoint::Checkpoint;
pub use config::{BackboneKind, DecoderKind, FusionKind, InputKind, ModelConfig};
pub use feature::{FeatureVolume, Layout};
pub use layers::{ForwardCtx, WeightOverrides};
pub use mfm::FusionState;
pub use model::{parameter_count, ModelInput, ModelTrace, SegmentationModel, SegmentationOutput};
pub use params::ParamStore;
pub use posenc::positional_encoding;
