//! Arbitrary-scale reconstruction of whole volumes.

use ndarray::{s, Array2, Array4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{self, FeatureGrid};
use crate::nn::SrModel;
use crate::simulate::cubic_resize;
use crate::volume::Volume;

/// Encoder inputs above this many voxels are encoded in overlapping tiles.
pub const DEFAULT_ENCODE_BUDGET: usize = 1 << 21;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SrRequest {
    /// Isotropic up-sampling factor, >= 1.
    pub scale: f64,
    /// Maximum coordinates decoded per batch.
    pub chunk_size: usize,
    /// Clamp decoded intensities to [0, 1].
    pub clamp_output: bool,
    /// Largest LR region (in voxels) encoded in one pass.
    #[serde(default = "default_budget")]
    pub encode_budget: usize,
}

fn default_budget() -> usize {
    DEFAULT_ENCODE_BUDGET
}

impl SrRequest {
    pub fn new(scale: f64) -> Self {
        Self {
            scale,
            chunk_size: 65_536,
            clamp_output: false,
            encode_budget: DEFAULT_ENCODE_BUDGET,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale >= 1.0) {
            return Err(Error::Config(format!("scale {} must be >= 1", self.scale)));
        }
        if self.chunk_size == 0 || self.encode_budget == 0 {
            return Err(Error::Config("chunk_size and encode_budget must be positive".into()));
        }
        Ok(())
    }
}

/// Encode `lr`, splitting it into tiles when it exceeds `budget` voxels.
///
/// Each tile is encoded with a halo of one receptive-field radius, so the
/// kept interior only depends on voxels the tile actually saw and matches a
/// whole-volume encoding.
pub fn encode_tiled(model: &SrModel<f32>, lr: &Volume, budget: usize) -> Result<FeatureGrid<f32>> {
    if lr.len() <= budget {
        return model.encode(lr);
    }
    let r = model.receptive_radius();
    let (d, h, w) = lr.shape();
    let mut core = 1usize;
    while (core + 1 + 2 * r).pow(3) <= budget {
        core += 1;
    }
    let c = model.feature_channels();
    let mut out = Array4::<f32>::zeros((d, h, w, c));
    let starts = |n: usize| (0..n).step_by(core).collect::<Vec<_>>();
    for &z in &starts(d) {
        for &y in &starts(h) {
            for &x in &starts(w) {
                let lo = [z, y, x];
                let hi = [(z + core).min(d), (y + core).min(h), (x + core).min(w)];
                let dims = [d, h, w];
                let rlo = [0, 1, 2].map(|a| lo[a].saturating_sub(r));
                let rhi = [0, 1, 2].map(|a| (hi[a] + r).min(dims[a]));
                let region = lr
                    .data()
                    .slice(s![rlo[0]..rhi[0], rlo[1]..rhi[1], rlo[2]..rhi[2]])
                    .to_owned();
                let tile = model.encode(&Volume::new(region, lr.voxel_size_mm())?)?;
                let keep = tile.features().slice(s![
                    lo[0] - rlo[0]..hi[0] - rlo[0],
                    lo[1] - rlo[1]..hi[1] - rlo[1],
                    lo[2] - rlo[2]..hi[2] - rlo[2],
                    ..
                ]);
                out.slice_mut(s![lo[0]..hi[0], lo[1]..hi[1], lo[2]..hi[2], ..]).assign(&keep);
            }
        }
    }
    FeatureGrid::new(out)
}

/// Reconstruct `lr` at `req.scale`: encode once, then interpolate and decode
/// the dense HR lattice chunk by chunk.
///
/// Output shape is `floor(scale * dim)` per axis. Decoding is pointwise, so
/// the result does not depend on `chunk_size`.
pub fn super_resolve(model: &SrModel<f32>, lr: &Volume, req: &SrRequest) -> Result<Volume> {
    req.validate()?;
    let grid = encode_tiled(model, lr, req.encode_budget)?;
    let shape = field::hr_grid_shape(lr.shape(), req.scale)?;
    let n = shape.0 * shape.1 * shape.2;
    let mut values = vec![0f32; n];
    values
        .par_chunks_mut(req.chunk_size)
        .enumerate()
        .try_for_each(|(ci, dst)| -> Result<()> {
            let start = ci * req.chunk_size;
            let coords: Vec<[f64; 3]> = (start..start + dst.len())
                .map(|i| field::lattice_coordinate(i, shape))
                .collect();
            let stencils = field::stencils(&coords, grid.spatial_shape())?;
            let mut feats = Array2::<f32>::zeros((coords.len(), grid.channels()));
            field::gather(grid.rows(), &stencils, feats.as_slice_mut().expect("fresh array"));
            let out = model.decode(&coords, feats.view())?;
            for (d, v) in dst.iter_mut().zip(out) {
                if !v.is_finite() {
                    return Err(Error::Numerical("decoder produced a non-finite intensity".into()));
                }
                *d = if req.clamp_output { v.clamp(0.0, 1.0) } else { v };
            }
            Ok(())
        })?;
    let (d, h, w) = lr.shape();
    let sp = lr.voxel_size_mm();
    let src = [d, h, w];
    let dst = [shape.0, shape.1, shape.2];
    let spacing = [0, 1, 2].map(|a| (sp[a] as f64 * src[a] as f64 / dst[a] as f64) as f32);
    Volume::from_vec(shape, values, spacing)
}

/// Cubic-interpolation baseline on the same HR lattice as [`super_resolve`].
pub fn cubic_super_resolve(lr: &Volume, scale: f64) -> Result<Volume> {
    cubic_resize(lr, field::hr_grid_shape(lr.shape(), scale)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{EncoderConfig, EncoderVariant, ModelConfig};
    use ndarray::Array3;

    fn model() -> SrModel<f32> {
        let cfg = ModelConfig::with_channels(
            EncoderConfig {
                variant: EncoderVariant::Rdn,
                base_channels: 4,
                num_blocks: 1,
                convs_per_block: 2,
                growth_rate: 4,
                out_channels: 6,
            },
            16,
        );
        SrModel::init(cfg, 9).unwrap()
    }

    fn input(shape: (usize, usize, usize)) -> Volume {
        Volume::new(
            Array3::from_shape_fn(shape, |(i, j, k)| (((i * 7 + j * 3 + k * 5) % 9) as f32) / 8.0),
            [1.0, 1.0, 2.0],
        )
        .unwrap()
    }

    #[test]
    fn shapes_and_spacing() {
        let m = model();
        let out = super_resolve(&m, &input((10, 10, 10)), &SrRequest::new(2.0)).unwrap();
        assert_eq!(out.shape(), (20, 20, 20));
        assert_eq!(out.voxel_size_mm(), [0.5, 0.5, 1.0]);
        let out = super_resolve(&m, &input((4, 5, 6)), &SrRequest::new(3.2)).unwrap();
        assert_eq!(out.shape(), (12, 16, 19));
    }

    #[test]
    fn chunking_is_bitwise_invariant() {
        let m = model();
        let lr = input((6, 5, 7));
        let base = super_resolve(&m, &lr, &SrRequest::new(2.5)).unwrap();
        for chunk in [1, 7, 4096] {
            let req = SrRequest {
                chunk_size: chunk,
                ..SrRequest::new(2.5)
            };
            let other = super_resolve(&m, &lr, &req).unwrap();
            assert!(base.as_slice().iter().map(|x| x.to_bits()).eq(other.as_slice().iter().map(|x| x.to_bits())));
        }
    }

    #[test]
    fn clamping() {
        let m = model();
        let req = SrRequest {
            clamp_output: true,
            ..SrRequest::new(1.5)
        };
        let out = super_resolve(&m, &input((5, 5, 5)), &req).unwrap();
        assert!(out.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn tiled_encoding_matches_whole_volume() {
        let m = model();
        let lr = input((13, 11, 12));
        let whole = m.encode(&lr).unwrap();
        let r = m.receptive_radius();
        // force cores of two voxels
        let budget = (2 + 2 * r).pow(3);
        let tiled = encode_tiled(&m, &lr, budget).unwrap();
        for (a, b) in whole.features().iter().zip(tiled.features().iter()) {
            assert!((a - b).abs() <= 1e-5 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn invalid_requests() {
        let m = model();
        let lr = input((4, 4, 4));
        assert!(super_resolve(&m, &lr, &SrRequest::new(0.5)).is_err());
        let req = SrRequest {
            chunk_size: 0,
            ..SrRequest::new(2.0)
        };
        assert!(super_resolve(&m, &lr, &req).is_err());
    }
}
