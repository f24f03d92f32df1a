//! The in-memory volume type and intensity/shape utilities.

use ndarray::{s, Array3, ArrayView3};

use crate::error::{Error, Result};

/// A 3D scalar intensity grid with voxel spacing.
///
/// Data is stored depth x height x width in C order. Every intensity is
/// finite; this is checked on construction so downstream code never has to.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Array3<f32>,
    voxel_size_mm: [f32; 3],
    range: (f32, f32),
}

impl Volume {
    pub fn new(data: Array3<f32>, voxel_size_mm: [f32; 3]) -> Result<Self> {
        let (d, h, w) = data.dim();
        if d == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("volume shape ({d}, {h}, {w}) has an empty axis")));
        }
        if voxel_size_mm.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Shape(format!("voxel size {voxel_size_mm:?} must be positive")));
        }
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in data.iter() {
            if !v.is_finite() {
                return Err(Error::Numerical("volume contains a non-finite intensity".into()));
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().into_owned()
        };
        Ok(Self {
            data,
            voxel_size_mm,
            range: (lo, hi),
        })
    }

    /// Build from a C-ordered buffer.
    pub fn from_vec(shape: (usize, usize, usize), values: Vec<f32>, voxel_size_mm: [f32; 3]) -> Result<Self> {
        let n = shape.0 * shape.1 * shape.2;
        if values.len() != n {
            return Err(Error::Shape(format!(
                "{} values do not fill shape {:?} ({} voxels)",
                values.len(),
                shape,
                n
            )));
        }
        let data = Array3::from_shape_vec(shape, values).map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(data, voxel_size_mm)
    }

    pub fn zeros(shape: (usize, usize, usize)) -> Result<Self> {
        Self::new(Array3::zeros(shape), [1.0; 3])
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn voxel_size_mm(&self) -> [f32; 3] {
        self.voxel_size_mm
    }

    pub fn with_voxel_size(mut self, voxel_size_mm: [f32; 3]) -> Result<Self> {
        if voxel_size_mm.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Shape(format!("voxel size {voxel_size_mm:?} must be positive")));
        }
        self.voxel_size_mm = voxel_size_mm;
        Ok(self)
    }

    /// Cached (min, max) intensity.
    pub fn intensity_range(&self) -> (f32, f32) {
        self.range
    }

    pub fn data(&self) -> ArrayView3<'_, f32> {
        self.data.view()
    }

    /// Contiguous C-order view of the intensities.
    pub fn as_slice(&self) -> &[f32] {
        self.data.as_slice().expect("volume data is kept in standard layout")
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn get(&self, index: (usize, usize, usize)) -> f32 {
        self.data[index]
    }

    /// Apply `f` to every voxel, keeping spacing.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(self.data.mapv(f), self.voxel_size_mm)
    }
}

/// Min-max normalize to [0, 1]. A constant volume maps to all zeros.
pub fn normalize_intensity(v: &Volume) -> Volume {
    let (lo, hi) = v.intensity_range();
    let data = if hi > lo {
        let span = (hi - lo) as f64;
        v.data.mapv(|x| (((x - lo) as f64) / span).clamp(0.0, 1.0) as f32)
    } else {
        Array3::zeros(v.shape())
    };
    Volume::new(data, v.voxel_size_mm).expect("normalized values are finite")
}

/// Center-crop axes larger than `target` and zero-pad axes smaller than it.
///
/// Padding puts the extra voxel on the high side when the difference is odd;
/// cropping drops the extra voxel from the high side as well.
pub fn crop_pad(v: &Volume, target: (usize, usize, usize)) -> Result<Volume> {
    if target.0 == 0 || target.1 == 0 || target.2 == 0 {
        return Err(Error::Shape(format!("target shape {target:?} has an empty axis")));
    }
    let src = v.shape();
    let src = [src.0, src.1, src.2];
    let dst = [target.0, target.1, target.2];
    // For each axis: (source start, destination start, length copied).
    let mut plan = [(0usize, 0usize, 0usize); 3];
    for axis in 0..3 {
        plan[axis] = if src[axis] >= dst[axis] {
            ((src[axis] - dst[axis]) / 2, 0, dst[axis])
        } else {
            (0, (dst[axis] - src[axis]) / 2, src[axis])
        };
    }
    let mut out = Array3::<f32>::zeros(target);
    let (a, b, c) = (plan[0], plan[1], plan[2]);
    out.slice_mut(s![b_range(a), b_range(b), b_range(c)])
        .assign(&v.data.slice(s![a_range(a), a_range(b), a_range(c)]));
    Volume::new(out, v.voxel_size_mm)
}

fn a_range(p: (usize, usize, usize)) -> std::ops::Range<usize> {
    p.0..p.0 + p.2
}

fn b_range(p: (usize, usize, usize)) -> std::ops::Range<usize> {
    p.1..p.1 + p.2
}
