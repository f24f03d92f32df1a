//! Arbitrary-scale super-resolution for 3D volumes.
//!
//! A convolutional encoder turns a low-resolution volume into a per-voxel
//! feature grid. Features are trilinearly interpolated at any continuous
//! coordinate and decoded by a coordinate-conditioned MLP, so one trained
//! model reconstructs at any up-sampling factor.
//!
//! Module map:
//! - [`volume`] and [`io`]: the [`Volume`] type, NIfTI-1 and `vvol` files.
//! - [`simulate`]: cubic downsampling and LR/HR training patch extraction.
//! - [`field`]: coordinate conventions, trilinear feature interpolation.
//! - [`nn`]: encoder variants, decoder MLP, checkpoints.
//! - [`train`]: L1 objective, Adam, step-decay schedule, best-checkpoint loop.
//! - [`infer`]: chunked arbitrary-scale reconstruction.
//! - [`metrics`]: PSNR, SSIM and slice-wise aggregation.

pub mod error;
pub mod field;
pub mod fsutil;
pub mod infer;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod simulate;
pub mod train;
pub mod volume;
pub mod real;

pub use error::{Error, Result};
pub use field::{CoordinateBatch, FeatureGrid};
pub use infer::{super_resolve, SrRequest};
pub use io::{read_volume, write_volume, VolumeFormat};
pub use nn::{DecoderConfig, EncoderConfig, EncoderVariant, ModelConfig, SrModel};
pub use simulate::{PatchPair, ScaleSampler};
pub use train::TrainConfig;
pub use real::Real;
pub use volume::Volume;
