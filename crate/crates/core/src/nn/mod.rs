//! Encoder and decoder networks with hand-written backward passes.

pub mod checkpoint;
mod config;
pub mod decoder;
pub mod encoder;
pub(crate) mod layers;
mod model;
pub mod params;

pub(crate) use model::{channels_last, decoder_input, volume_row};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use config::{DecoderConfig, EncoderConfig, EncoderVariant, ModelConfig};
pub use decoder::decoder_param_count;
pub use encoder::{encoder_param_count, min_input_size, receptive_radius};
pub use model::SrModel;
pub use params::{ParamStore, Tensor};
