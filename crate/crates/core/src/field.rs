//! Continuous coordinates over a voxel lattice and trilinear feature
//! interpolation.
//!
//! All lattices share one convention: the normalized domain is `[-1, 1]` on
//! each axis and voxel `i` of an axis with `n` voxels sits at
//! `2 * (i + 0.5) / n - 1`. LR and HR lattices of a patch therefore cover the
//! same extent whatever their sizes.

use ndarray::{Array2, Array4, ArrayView2};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::Volume;

/// Slack allowed outside `[-1, 1]` before a coordinate is rejected.
pub const DOMAIN_TOLERANCE: f64 = 1e-9;

/// Grid positions closer than this to an integer are snapped onto it, so
/// queries generated on a lattice reproduce lattice values exactly.
const SNAP: f64 = 1e-9;

pub fn voxel_center(i: usize, n: usize) -> f64 {
    2.0 * (i as f64 + 0.5) / n as f64 - 1.0
}

/// Continuous lattice index of a normalized coordinate.
pub fn continuous_index(c: f64, n: usize) -> f64 {
    (c + 1.0) / 2.0 * n as f64 - 0.5
}

/// Query coordinates, optionally paired with target intensities.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CoordinateBatch {
    coords: Vec<[f64; 3]>,
    targets: Option<Vec<f32>>,
}

impl CoordinateBatch {
    pub fn new(coords: Vec<[f64; 3]>, targets: Option<Vec<f32>>) -> Result<Self> {
        if let Some(t) = &targets {
            if t.len() != coords.len() {
                return Err(Error::Shape(format!(
                    "{} targets for {} coordinates",
                    t.len(),
                    coords.len()
                )));
            }
        }
        for c in &coords {
            check_domain(c)?;
        }
        Ok(Self { coords, targets })
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn targets(&self) -> Option<&[f32]> {
        self.targets.as_deref()
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

fn check_domain(c: &[f64; 3]) -> Result<()> {
    if c.iter().all(|x| x.abs() <= 1.0 + DOMAIN_TOLERANCE) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{c:?} is outside [-1, 1]^3")))
    }
}

/// Per-voxel latent features over a lattice, stored `(d, h, w, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid<T: Real = f32> {
    features: Array4<T>,
}

impl<T: Real> FeatureGrid<T> {
    pub fn new(features: Array4<T>) -> Result<Self> {
        let (d, h, w, c) = features.dim();
        if d == 0 || h == 0 || w == 0 || c == 0 {
            return Err(Error::Shape(format!("feature grid shape {:?} has an empty axis", (d, h, w, c))));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("feature grid contains non-finite values".into()));
        }
        let features = if features.is_standard_layout() {
            features
        } else {
            features.as_standard_layout().into_owned()
        };
        Ok(Self { features })
    }

    /// Wrap features already known to be finite and in standard layout.
    pub(crate) fn from_raw(features: Array4<T>) -> Self {
        debug_assert!(features.is_standard_layout());
        Self { features }
    }

    pub fn spatial_shape(&self) -> (usize, usize, usize) {
        let (d, h, w, _) = self.features.dim();
        (d, h, w)
    }

    pub fn channels(&self) -> usize {
        self.features.dim().3
    }

    pub fn features(&self) -> &Array4<T> {
        &self.features
    }

    pub fn into_features(self) -> Array4<T> {
        self.features
    }

    /// Feature vectors as rows of a `(voxels, C)` matrix in C order.
    pub fn rows(&self) -> ArrayView2<'_, T> {
        let (d, h, w, c) = self.features.dim();
        ArrayView2::from_shape((d * h * w, c), self.features.as_slice().expect("standard layout"))
            .expect("shape matches storage")
    }
}

/// The eight lattice neighbors of one query and their trilinear weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub index: [usize; 8],
    pub weight: [f64; 8],
}

fn axis_neighbors(c: f64, n: usize) -> ([usize; 2], [f64; 2]) {
    let mut g = continuous_index(c, n).clamp(-0.5, n as f64 - 0.5);
    let r = g.round();
    if (g - r).abs() < SNAP {
        g = r;
    }
    let base = g.floor();
    let t = g - base;
    let base = base as isize;
    let lo = base.clamp(0, n as isize - 1) as usize;
    let hi = (base + 1).clamp(0, n as isize - 1) as usize;
    ([lo, hi], [1.0 - t, t])
}

/// Neighbor indices (flat, into the C-ordered lattice) and weights for `c`.
pub fn stencil(c: &[f64; 3], shape: (usize, usize, usize)) -> Result<Stencil> {
    check_domain(c)?;
    let (d, h, w) = shape;
    let (iz, wz) = axis_neighbors(c[0], d);
    let (iy, wy) = axis_neighbors(c[1], h);
    let (ix, wx) = axis_neighbors(c[2], w);
    let mut index = [0usize; 8];
    let mut weight = [0f64; 8];
    for corner in 0..8 {
        let (a, b, e) = ((corner >> 2) & 1, (corner >> 1) & 1, corner & 1);
        index[corner] = (iz[a] * h + iy[b]) * w + ix[e];
        weight[corner] = wz[a] * wy[b] * wx[e];
    }
    Ok(Stencil { index, weight })
}

pub fn stencils(coords: &[[f64; 3]], shape: (usize, usize, usize)) -> Result<Vec<Stencil>> {
    coords.iter().map(|c| stencil(c, shape)).collect()
}

/// Gather weighted neighbor rows into `out` (one row per stencil).
pub(crate) fn gather<T: Real>(rows: ArrayView2<'_, T>, stencils: &[Stencil], out: &mut [T]) {
    let c = rows.ncols();
    let src = rows.as_slice().expect("standard layout");
    for (q, st) in stencils.iter().enumerate() {
        let dst = &mut out[q * c..(q + 1) * c];
        dst.fill(T::zero());
        for k in 0..8 {
            let w = T::from_f64_lossy(st.weight[k]);
            if w == T::zero() {
                continue;
            }
            let row = &src[st.index[k] * c..(st.index[k] + 1) * c];
            for (o, v) in dst.iter_mut().zip(row) {
                *o += w * *v;
            }
        }
    }
}

/// Adjoint of [`gather`]: scatter `upstream` rows into lattice gradients.
pub(crate) fn scatter<T: Real>(upstream: ArrayView2<'_, T>, stencils: &[Stencil], grad_rows: &mut [T]) {
    let c = upstream.ncols();
    for (q, st) in stencils.iter().enumerate() {
        let g = upstream.row(q);
        for k in 0..8 {
            let w = T::from_f64_lossy(st.weight[k]);
            if w == T::zero() {
                continue;
            }
            let dst = &mut grad_rows[st.index[k] * c..(st.index[k] + 1) * c];
            for (o, v) in dst.iter_mut().zip(g.iter()) {
                *o += w * *v;
            }
        }
    }
}

/// Interpolate the feature grid at every query: `(len(batch), C)`.
///
/// Each output row is the convex combination of the 8 nearest lattice
/// vectors weighted by the volume of the opposite sub-cuboid. Neighbors
/// beyond the lattice are clamped to its edge.
pub fn trilinear_interpolate<T: Real>(grid: &FeatureGrid<T>, batch: &CoordinateBatch) -> Result<Array2<T>> {
    let st = stencils(batch.coords(), grid.spatial_shape())?;
    let c = grid.channels();
    let mut out = Array2::<T>::zeros((st.len(), c));
    const SHARD: usize = 1024;
    out.as_slice_mut()
        .expect("fresh array")
        .par_chunks_mut(SHARD * c)
        .zip(st.par_chunks(SHARD))
        .for_each(|(dst, s)| gather(grid.rows(), s, dst));
    Ok(out)
}

/// Shape of the dense HR lattice for scale `k`: `floor(k * dim)` per axis.
pub fn hr_grid_shape(lr_shape: (usize, usize, usize), k: f64) -> Result<(usize, usize, usize)> {
    if !(k.is_finite() && k >= 1.0) {
        return Err(Error::Config(format!("scale {k} must be >= 1")));
    }
    // The epsilon absorbs products like 2.9 * 10 = 28.999999999999996.
    let f = |n: usize| (k * n as f64 + 1e-9).floor() as usize;
    Ok((f(lr_shape.0), f(lr_shape.1), f(lr_shape.2)))
}

/// Normalized coordinate of flat voxel `index` of a lattice in C order.
pub fn lattice_coordinate(index: usize, shape: (usize, usize, usize)) -> [f64; 3] {
    let (d, h, w) = shape;
    let l = index % w;
    let j = (index / w) % h;
    let i = index / (w * h);
    [voxel_center(i, d), voxel_center(j, h), voxel_center(l, w)]
}

/// Every voxel center of the HR lattice at scale `k`, in C order.
pub fn make_hr_grid(lr_shape: (usize, usize, usize), k: f64) -> Result<CoordinateBatch> {
    let shape = hr_grid_shape(lr_shape, k)?;
    let n = shape.0 * shape.1 * shape.2;
    let coords = (0..n).map(|i| lattice_coordinate(i, shape)).collect();
    Ok(CoordinateBatch {
        coords,
        targets: None,
    })
}

/// Sample `k` distinct voxels of `hr` uniformly, returning their centers
/// and intensities.
pub fn sample_coordinates<R: Rng + ?Sized>(hr: &Volume, k: usize, rng: &mut R) -> Result<CoordinateBatch> {
    let n = hr.len();
    if k > n {
        return Err(Error::Shape(format!("cannot sample {k} distinct voxels from {n}")));
    }
    let shape = hr.shape();
    let values = hr.as_slice();
    let picks = rand::seq::index::sample(rng, n, k);
    let mut coords = Vec::with_capacity(k);
    let mut targets = Vec::with_capacity(k);
    for i in picks.iter() {
        coords.push(lattice_coordinate(i, shape));
        targets.push(values[i]);
    }
    Ok(CoordinateBatch {
        coords,
        targets: Some(targets),
    })
}
