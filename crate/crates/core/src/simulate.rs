//! Low-resolution simulation: separable cubic resampling and extraction of
//! LR/HR training patch pairs at random scales.

use ndarray::{s, Array3, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Keys cubic convolution parameter (Catmull-Rom).
pub const CUBIC_A: f64 = -0.5;

/// Keys cubic convolution kernel.
pub fn cubic_kernel(x: f64) -> f64 {
    let a = CUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Mirror an index into `0..n` without repeating the edge sample
/// (`-1 -> 1`, `n -> n - 2`).
fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Source coordinate sampled by output index `o` when an axis of length
/// `n_in` is resampled to `n_out`, with voxel centers aligned.
pub fn source_coordinate(o: usize, n_in: usize, n_out: usize) -> f64 {
    (o as f64 + 0.5) * (n_in as f64 / n_out as f64) - 0.5
}

/// Per-output taps: four (index, weight) pairs.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<[(usize, f64); 4]> {
    (0..n_out)
        .map(|o| {
            let x = source_coordinate(o, n_in, n_out);
            let base = x.floor();
            let t = x - base;
            let base = base as isize;
            let weights = [
                cubic_kernel(t + 1.0),
                cubic_kernel(t),
                cubic_kernel(1.0 - t),
                cubic_kernel(2.0 - t),
            ];
            let mut taps = [(0usize, 0f64); 4];
            for (m, w) in weights.iter().enumerate() {
                taps[m] = (mirror(base - 1 + m as isize, n_in), *w);
            }
            taps
        })
        .collect()
}

fn resample_axis(src: ArrayView3<'_, f32>, axis: usize, n_out: usize) -> Array3<f32> {
    let n_in = src.len_of(Axis(axis));
    let mut shape = [src.dim().0, src.dim().1, src.dim().2];
    shape[axis] = n_out;
    let mut out = Array3::<f32>::zeros((shape[0], shape[1], shape[2]));
    let taps = axis_taps(n_in, n_out);
    for (o, tap) in taps.iter().enumerate() {
        let mut lane = out.index_axis_mut(Axis(axis), o);
        let views: Vec<_> = tap.iter().map(|&(i, w)| (src.index_axis(Axis(axis), i), w)).collect();
        ndarray::Zip::indexed(&mut lane).for_each(|idx, v| {
            let mut acc = 0.0f64;
            for (view, w) in &views {
                acc += *w * view[idx] as f64;
            }
            *v = acc as f32;
        });
    }
    out
}

/// Separable cubic resampling of `v` to an explicit output shape. Voxel
/// spacing is scaled by the per-axis size ratio.
pub fn cubic_resize(v: &Volume, shape: (usize, usize, usize)) -> Result<Volume> {
    let target = [shape.0, shape.1, shape.2];
    if target.contains(&0) {
        return Err(Error::Shape(format!("cannot resample to {shape:?}")));
    }
    let (d, h, w) = v.shape();
    let src = [d, h, w];
    let mut data = v.data().to_owned();
    for axis in 0..3 {
        if target[axis] != src[axis] {
            data = resample_axis(data.view(), axis, target[axis]);
        }
    }
    let spacing = v.voxel_size_mm();
    let spacing = [0, 1, 2].map(|a| (spacing[a] as f64 * src[a] as f64 / target[a] as f64) as f32);
    Volume::new(data, spacing)
}

/// Downsample by factor `k` using cubic interpolation. Output shape is
/// `floor(dim / k)` per axis.
pub fn cubic_downsample(v: &Volume, k: f64) -> Result<Volume> {
    if !(k.is_finite() && k >= 1.0) {
        return Err(Error::Config(format!("downsampling factor {k} must be >= 1")));
    }
    let (d, h, w) = v.shape();
    let out = [d, h, w].map(|n| (n as f64 / k).floor() as usize);
    if out.contains(&0) {
        return Err(Error::Shape(format!(
            "downsampling {:?} by {k} leaves an empty axis",
            (d, h, w)
        )));
    }
    cubic_resize(v, (out[0], out[1], out[2]))
}

/// Seeded uniform sampler of isotropic up-sampling scales.
#[derive(Debug, Clone)]
pub struct ScaleSampler {
    k_min: f64,
    k_max: f64,
    seed: u64,
    rng: ChaCha8Rng,
}

impl ScaleSampler {
    pub fn new(k_min: f64, k_max: f64, seed: u64) -> Result<Self> {
        if !(k_min.is_finite() && k_max.is_finite() && k_min >= 1.0 && k_max >= k_min) {
            return Err(Error::Config(format!(
                "scale range [{k_min}, {k_max}] must satisfy 1 <= k_min <= k_max"
            )));
        }
        Ok(Self {
            k_min,
            k_max,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn range(&self) -> (f64, f64) {
        (self.k_min, self.k_max)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Draw the next scale from U(k_min, k_max).
    pub fn sample_scale(&mut self) -> f64 {
        if self.k_min == self.k_max {
            return self.k_min;
        }
        self.rng.gen_range(self.k_min..=self.k_max)
    }

    fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// A simulated training example.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub lr: Volume,
    pub hr: Volume,
    /// Realized HR/LR side ratio after rounding the HR side to an integer.
    pub effective_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSpec {
    pub n_patches: usize,
    pub lr_size: usize,
    pub crop_size: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            n_patches: 6,
            lr_size: 10,
            crop_size: 40,
        }
    }
}

/// HR patch side for a sampled scale.
pub fn hr_side(lr_size: usize, k: f64) -> usize {
    (lr_size as f64 * k).round() as usize
}

/// Random-crop `crop_size`^3 blocks, center-crop each to `round(lr_size * k)`^3
/// for a freshly sampled `k`, and cubic-downsample that HR patch to
/// `lr_size`^3.
pub fn extract_training_pairs(v: &Volume, spec: &PatchSpec, sampler: &mut ScaleSampler) -> Result<Vec<PatchPair>> {
    let (d, h, w) = v.shape();
    let crop = spec.crop_size;
    if spec.lr_size == 0 || crop == 0 {
        return Err(Error::Config("lr_size and crop_size must be positive".into()));
    }
    if d < crop || h < crop || w < crop {
        return Err(Error::Shape(format!(
            "volume {:?} is smaller than the {crop}^3 crop",
            (d, h, w)
        )));
    }
    let (_, k_max) = sampler.range();
    if hr_side(spec.lr_size, k_max) > crop {
        return Err(Error::Config(format!(
            "lr_size {} at k_max {k_max} does not fit in a {crop}^3 crop",
            spec.lr_size
        )));
    }
    let spacing = v.voxel_size_mm();
    let mut pairs = Vec::with_capacity(spec.n_patches);
    for _ in 0..spec.n_patches {
        let origin = [d, h, w].map(|n| sampler.rng().gen_range(0..=n - crop));
        let k = sampler.sample_scale();
        let q = hr_side(spec.lr_size, k).clamp(spec.lr_size, crop);
        let off = (crop - q) / 2;
        let start = origin.map(|o| o + off);
        let block = v
            .data()
            .slice(s![
                start[0]..start[0] + q,
                start[1]..start[1] + q,
                start[2]..start[2] + q
            ])
            .to_owned();
        let hr = Volume::new(block, spacing)?;
        let lr = cubic_resize(&hr, (spec.lr_size, spec.lr_size, spec.lr_size))?;
        pairs.push(PatchPair {
            lr,
            hr,
            effective_scale: q as f64 / spec.lr_size as f64,
        });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(shape: (usize, usize, usize), f: impl Fn(usize, usize, usize) -> f32) -> Volume {
        Volume::new(Array3::from_shape_fn(shape, |(i, j, k)| f(i, j, k)), [1.0; 3]).unwrap()
    }

    #[test]
    fn kernel_is_interpolating_and_partition_of_unity() {
        assert_eq!(cubic_kernel(0.0), 1.0);
        assert_eq!(cubic_kernel(1.0), 0.0);
        assert_eq!(cubic_kernel(2.0), 0.0);
        for t in [0.0, 0.1, 0.25, 0.5, 0.9] {
            let s = cubic_kernel(t + 1.0) + cubic_kernel(t) + cubic_kernel(1.0 - t) + cubic_kernel(2.0 - t);
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mirror_boundary() {
        assert_eq!(mirror(-1, 5), 1);
        assert_eq!(mirror(-2, 5), 2);
        assert_eq!(mirror(5, 5), 3);
        assert_eq!(mirror(6, 5), 2);
        assert_eq!(mirror(3, 1), 0);
    }

    #[test]
    fn floor_shape_rule() {
        let v = Volume::zeros((40, 40, 40)).unwrap();
        assert_eq!(cubic_downsample(&v, 2.0).unwrap().shape(), (20, 20, 20));
        let v = Volume::zeros((40, 33, 10)).unwrap();
        let out = cubic_downsample(&v, 3.0).unwrap();
        assert_eq!(out.shape(), (13, 11, 3));
        let sp = out.voxel_size_mm();
        assert!((sp[0] - 40.0 / 13.0).abs() < 1e-6 && (sp[2] - 10.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn empty_output_is_shape_error() {
        let v = Volume::zeros((3, 8, 8)).unwrap();
        assert!(matches!(cubic_downsample(&v, 4.0), Err(Error::Shape(_))));
    }

    #[test]
    fn constant_is_preserved() {
        let v = vol((17, 12, 9), |_, _, _| 0.37);
        for k in [1.0, 1.5, 2.0, 2.7, 4.0] {
            let out = cubic_downsample(&v, k).unwrap();
            assert!(out.as_slice().iter().all(|&x| (x - 0.37).abs() < 1e-6), "k = {k}");
        }
    }

    #[test]
    fn ramp_is_reproduced_away_from_the_boundary() {
        // Mirror padding breaks linear reproduction only where the 4-tap
        // stencil leaves the volume: the first and last output voxel for k=2.
        let v = vol((40, 40, 40), |i, j, l| (i + j + l) as f32);
        let out = cubic_downsample(&v, 2.0).unwrap();
        let c = |o: usize| source_coordinate(o, 40, 20);
        for i in 1..19 {
            for j in 1..19 {
                for l in 1..19 {
                    let expected = c(i) + c(j) + c(l);
                    assert!((out.get((i, j, l)) as f64 - expected).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn factor_one_is_identity() {
        let v = vol((9, 7, 5), |i, j, l| ((i * 31 + j * 7 + l * 3) % 11) as f32 / 11.0);
        assert_eq!(cubic_downsample(&v, 1.0).unwrap(), v);
        let once = cubic_downsample(&v, 2.0).unwrap();
        assert_eq!(cubic_downsample(&once, 1.0).unwrap(), once);
    }

    #[test]
    fn sampler_degenerate_and_deterministic() {
        let mut s = ScaleSampler::new(3.0, 3.0, 1).unwrap();
        assert!((0..10).all(|_| s.sample_scale() == 3.0));
        let mut a = ScaleSampler::new(2.0, 4.0, 42).unwrap();
        let mut b = ScaleSampler::new(2.0, 4.0, 42).unwrap();
        let xa: Vec<f64> = (0..100).map(|_| a.sample_scale()).collect();
        let xb: Vec<f64> = (0..100).map(|_| b.sample_scale()).collect();
        assert_eq!(xa, xb);
        assert!(ScaleSampler::new(0.5, 2.0, 0).is_err());
        assert!(ScaleSampler::new(3.0, 2.0, 0).is_err());
    }

    #[test]
    fn sampler_moments() {
        // U(2,4): mean 3, sd 2/sqrt(12). The sample mean of 1e5 draws has
        // standard error sd/sqrt(1e5) ~ 1.83e-3; allow three of them.
        let mut s = ScaleSampler::new(2.0, 4.0, 7).unwrap();
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| s.sample_scale()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let se = (2.0 / 12f64.sqrt()) / (n as f64).sqrt();
        assert!((mean - 3.0).abs() < 3.0 * se, "mean {mean}");
        assert!(xs.iter().all(|&k| (2.0..=4.0).contains(&k)));
    }

    #[test]
    fn hr_side_rounding() {
        assert_eq!(hr_side(10, 2.0), 20);
        assert_eq!(hr_side(10, 3.5), 35);
        assert_eq!(hr_side(10, 2.73), 27);
        assert_eq!(27.0 / 10.0, 2.7);
    }

    #[test]
    fn fixed_scale_pairs() {
        let v = vol((48, 44, 40), |i, j, l| ((i * 3 + j * 5 + l * 7) % 13) as f32 / 13.0);
        let spec = PatchSpec {
            n_patches: 3,
            lr_size: 10,
            crop_size: 40,
        };
        for (k, q) in [(2.0, 20), (3.5, 35), (2.73, 27)] {
            let mut sampler = ScaleSampler::new(k, k, 3).unwrap();
            for p in extract_training_pairs(&v, &spec, &mut sampler).unwrap() {
                assert_eq!(p.hr.shape(), (q, q, q));
                assert_eq!(p.lr.shape(), (10, 10, 10));
                assert_eq!(p.effective_scale * 10.0, q as f64);
            }
        }
    }

    #[test]
    fn pairs_are_deterministic_and_inside_the_source() {
        // Encode the voxel index in the intensity so each HR patch can be
        // located in the source.
        let v = vol((42, 41, 40), |i, j, l| (i * 41 * 40 + j * 40 + l) as f32);
        let spec = PatchSpec {
            n_patches: 8,
            lr_size: 10,
            crop_size: 40,
        };
        let run = || {
            let mut sampler = ScaleSampler::new(2.0, 4.0, 11).unwrap();
            extract_training_pairs(&v, &spec, &mut sampler).unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        for p in &a {
            let (q, _, _) = p.hr.shape();
            let first = p.hr.get((0, 0, 0)) as usize;
            let (i, j, l) = (first / (41 * 40), (first / 40) % 41, first % 40);
            assert!(i + q <= 42 && j + q <= 41 && l + q <= 40);
            assert_eq!(p.hr.data(), v.data().slice(s![i..i + q, j..j + q, l..l + q]));
        }
    }

    #[test]
    fn small_volume_is_rejected() {
        let v = Volume::zeros((39, 50, 50)).unwrap();
        let mut sampler = ScaleSampler::new(2.0, 4.0, 0).unwrap();
        let err = extract_training_pairs(&v, &PatchSpec::default(), &mut sampler).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }
}
