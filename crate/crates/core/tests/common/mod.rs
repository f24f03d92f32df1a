#![allow(dead_code)]

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxsr::nn::EncoderConfig;
use voxsr::train::{loss_and_gradients, predict, Sample};
use voxsr::{EncoderVariant, ModelConfig, SrModel, Volume};

/// Center of voxel `i` on an axis of `n` voxels, in [-1, 1].
fn center(i: usize, n: usize) -> f64 {
    -1.0 + (2.0 * i as f64 + 1.0) / n as f64
}

/// Lower and upper neighbour voxel along one axis for normalized coordinate
/// `x`, found by scanning centers rather than inverting the mapping.
fn bracket(x: f64, n: usize) -> (usize, usize) {
    if x <= center(0, n) {
        return (0, 0);
    }
    if x >= center(n - 1, n) {
        return (n - 1, n - 1);
    }
    let mut lo = 0;
    while center(lo + 1, n) <= x {
        lo += 1;
    }
    (lo, lo + 1)
}

/// Brute-force trilinear interpolation: each of the eight surrounding
/// feature vectors is weighted by the volume of the sub-cuboid spanned by
/// the query and the diagonally opposite corner, divided by the volume of
/// the whole cell. Axes where the query sits outside the outermost centers
/// collapse onto the edge voxel.
pub fn trilinear_oracle(features: &Array4<f64>, x: [f64; 3]) -> Vec<f64> {
    let (d, h, w, c) = features.dim();
    let dims = [d, h, w];
    let br: Vec<(usize, usize)> = (0..3).map(|a| bracket(x[a], dims[a])).collect();
    let mut out = vec![0.0; c];
    let mut total = 0.0;
    for corner in 0..8 {
        let mut idx = [0usize; 3];
        let mut sub = 1.0;
        let mut skip = false;
        for a in 0..3 {
            let upper = (corner >> a) & 1 == 1;
            let (lo, hi) = br[a];
            if lo == hi {
                if upper {
                    skip = true;
                }
                idx[a] = lo;
                continue;
            }
            idx[a] = if upper { hi } else { lo };
            let opposite = if upper { center(lo, dims[a]) } else { center(hi, dims[a]) };
            sub *= (x[a] - opposite).abs();
        }
        if skip {
            continue;
        }
        total += sub;
        for ch in 0..c {
            out[ch] += sub * features[[idx[0], idx[1], idx[2], ch]];
        }
    }
    out.iter().map(|v| v / total).collect()
}

/// Sum of seeded Gaussian blobs on a `side^3` lattice, rescaled to [0, 1].
pub fn blob_volume(side: usize, blobs: usize, seed: u64) -> Volume {
    blob_volume_with(side, blobs, (0.06, 0.16), seed)
}

/// [`blob_volume`] with blob widths drawn from `sigma` (fractions of `side`).
pub fn blob_volume_with(side: usize, blobs: usize, sigma: (f64, f64), seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<([f64; 3], f64, f64)> = (0..blobs)
        .map(|_| {
            let c = [0, 1, 2].map(|_| rng.gen_range(0.0..side as f64));
            let sigma = rng.gen_range(sigma.0..sigma.1) * side as f64;
            let amp = rng.gen_range(0.3..1.0);
            (c, sigma, amp)
        })
        .collect();
    let raw = Array3::from_shape_fn((side, side, side), |(i, j, k)| {
        params
            .iter()
            .map(|(c, s, a)| {
                let r2 = (i as f64 - c[0]).powi(2) + (j as f64 - c[1]).powi(2) + (k as f64 - c[2]).powi(2);
                a * (-r2 / (2.0 * s * s)).exp()
            })
            .sum::<f64>()
    });
    let max = raw.iter().cloned().fold(f64::MIN, f64::max);
    let min = raw.iter().cloned().fold(f64::MAX, f64::min);
    Volume::new(raw.mapv(|v| ((v - min) / (max - min)) as f32), [1.0; 3]).unwrap()
}

pub fn miniature_config() -> ModelConfig {
    ModelConfig::with_channels(
        EncoderConfig {
            variant: EncoderVariant::Rdn,
            base_channels: 4,
            num_blocks: 1,
            convs_per_block: 3,
            growth_rate: 4,
            out_channels: 4,
        },
        8,
    )
}

/// Move biases off their zero initialization so pre-activations sit away from
/// the ReLU kink, where finite differences are meaningless.
pub fn jitter_biases(model: &mut SrModel<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.params_mut().tensors_mut() {
        if t.name.ends_with(".bias") {
            t.data.iter_mut().for_each(|b| *b = rng.gen_range(-0.3..0.3));
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub agreeing: usize,
    pub total: usize,
    /// Parameters whose analytic gradient is nonzero, and how many of those agree.
    pub live: usize,
    pub live_agreeing: usize,
    pub worst: f64,
}

impl GradCheck {
    pub fn fraction(&self) -> f64 {
        self.agreeing as f64 / self.total as f64
    }

    pub fn live_fraction(&self) -> f64 {
        self.live_agreeing as f64 / self.live as f64
    }

    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            agreeing: self.agreeing + other.agreeing,
            total: self.total + other.total,
            live: self.live + other.live,
            live_agreeing: self.live_agreeing + other.live_agreeing,
            worst: self.worst.max(other.worst),
        }
    }
}

/// Mean L1 loss from a forward pass only.
pub fn forward_loss(model: &SrModel<f64>, samples: &[Sample]) -> f64 {
    let preds = predict(model, samples).unwrap();
    let mut sum = 0.0;
    let mut n = 0;
    for (p, s) in preds.iter().zip(samples) {
        for (a, t) in p.iter().zip(s.batch.targets().unwrap()) {
            sum += (a - *t as f64).abs();
            n += 1;
        }
    }
    sum / n as f64
}

/// Compare analytic gradients of the mean L1 loss with central differences
/// in double precision.
pub fn gradient_check(model: &SrModel<f64>, samples: &[Sample], step: f64, tol: f64) -> GradCheck {
    let (_, grads) = loss_and_gradients(model, samples).unwrap();
    let total = model.params().count();
    let mut probe = model.clone();
    let mut agreeing = 0;
    let mut live = 0;
    let mut live_agreeing = 0;
    let mut worst: f64 = 0.0;
    for i in 0..total {
        let base = model.params().flat_get(i);
        probe.params_mut().flat_set(i, base + step);
        let up = forward_loss(&probe, samples);
        probe.params_mut().flat_set(i, base - step);
        let down = forward_loss(&probe, samples);
        probe.params_mut().flat_set(i, base);
        let numeric = (up - down) / (2.0 * step);
        let analytic = grads.flat_get(i);
        let scale = numeric.abs().max(analytic.abs());
        let rel = if scale < 1e-10 { 0.0 } else { (numeric - analytic).abs() / scale };
        worst = worst.max(rel);
        let ok = rel <= tol;
        agreeing += ok as usize;
        if analytic != 0.0 {
            live += 1;
            live_agreeing += ok as usize;
        }
    }
    GradCheck {
        agreeing,
        total,
        live,
        live_agreeing,
        worst,
    }
}
