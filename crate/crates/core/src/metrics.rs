//! Reference-based quality metrics for volumes.
//!
//! `psnr_paper` keeps the square root of the mean *absolute* error in the
//! denominator; `psnr_standard` is the conventional MSE form. Both use the
//! reference maximum as the peak `L` and return `f64::INFINITY` for identical
//! inputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Side of the cubic window used by [`ssim_windowed`].
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_shapes(sr: &Volume, gt: &Volume) -> Result<()> {
    if sr.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "reconstruction {:?} and reference {:?} differ in shape",
            sr.shape(),
            gt.shape()
        )));
    }
    Ok(())
}

/// `20 log10(L / sqrt(mean |sr - gt|))`.
pub fn psnr_paper(sr: &Volume, gt: &Volume) -> Result<f64> {
    check_shapes(sr, gt)?;
    psnr_paper_values(&widen(sr), &widen(gt), reference_peak(gt))
}

/// `10 log10(L^2 / mean (sr - gt)^2)`.
pub fn psnr_standard(sr: &Volume, gt: &Volume) -> Result<f64> {
    check_shapes(sr, gt)?;
    psnr_standard_values(&widen(sr), &widen(gt), reference_peak(gt))
}

/// The reference maximum; validated only once the inputs are known to differ.
fn reference_peak(gt: &Volume) -> f64 {
    gt.intensity_range().1 as f64
}

fn widen(v: &Volume) -> Vec<f64> {
    v.as_slice().iter().map(|&x| x as f64).collect()
}

fn check_lengths(sr: &[f64], gt: &[f64]) -> Result<()> {
    if sr.len() != gt.len() || sr.is_empty() {
        return Err(Error::Shape(format!("value counts {} and {} must match and be non-zero", sr.len(), gt.len())));
    }
    Ok(())
}

fn check_peak(l: f64) -> Result<()> {
    if !(l > 0.0 && l.is_finite()) {
        return Err(Error::Numerical(format!("peak {l} must be positive")));
    }
    Ok(())
}

/// [`psnr_paper`] on raw values with an explicit peak `l`.
pub fn psnr_paper_values(sr: &[f64], gt: &[f64], l: f64) -> Result<f64> {
    check_lengths(sr, gt)?;
    let mae = sr.iter().zip(gt).map(|(a, b)| (a - b).abs()).sum::<f64>() / sr.len() as f64;
    if mae == 0.0 {
        return Ok(f64::INFINITY);
    }
    check_peak(l)?;
    Ok(20.0 * (l / mae.sqrt()).log10())
}

/// [`psnr_standard`] on raw values with an explicit peak `l`.
pub fn psnr_standard_values(sr: &[f64], gt: &[f64], l: f64) -> Result<f64> {
    check_lengths(sr, gt)?;
    let mse = sr.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / sr.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    check_peak(l)?;
    Ok(10.0 * (l * l / mse).log10())
}

/// Global SSIM on raw values with an explicit peak `l`.
pub fn ssim_global_values(sr: &[f64], gt: &[f64], l: f64) -> Result<f64> {
    check_lengths(sr, gt)?;
    check_peak(l)?;
    let (c1, c2) = ssim_constants(l);
    Ok(Moments::of(sr.iter().copied().zip(gt.iter().copied())).ssim(c1, c2))
}

/// Means, population variances and covariance of a paired sample.
#[derive(Debug, Clone, Copy)]
struct Moments {
    mx: f64,
    my: f64,
    vx: f64,
    vy: f64,
    cov: f64,
}

impl Moments {
    fn of(it: impl Iterator<Item = (f64, f64)>) -> Self {
        let v: Vec<(f64, f64)> = it.collect();
        let n = v.len() as f64;
        let mx = v.iter().map(|p| p.0).sum::<f64>() / n;
        let my = v.iter().map(|p| p.1).sum::<f64>() / n;
        let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
        for (x, y) in &v {
            vx += (x - mx) * (x - mx);
            vy += (y - my) * (y - my);
            cov += (x - mx) * (y - my);
        }
        Self {
            mx,
            my,
            vx: vx / n,
            vy: vy / n,
            cov: cov / n,
        }
    }

    fn ssim(&self, c1: f64, c2: f64) -> f64 {
        ssim_from_stats(self.mx, self.my, self.vx, self.vy, self.cov, c1, c2)
    }
}

/// SSIM from means, population variances and covariance.
pub fn ssim_from_stats(mx: f64, my: f64, vx: f64, vy: f64, cov: f64, c1: f64, c2: f64) -> f64 {
    ((2.0 * (mx * my) + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

fn ssim_constants(l: f64) -> (f64, f64) {
    ((SSIM_K1 * l).powi(2), (SSIM_K2 * l).powi(2))
}

/// SSIM peak: the reference maximum, or 1 for an all-zero reference.
fn ssim_peak(gt: &Volume) -> f64 {
    let l = reference_peak(gt);
    if l > 0.0 {
        l
    } else {
        1.0
    }
}

/// Single-window SSIM over whole-volume statistics.
pub fn ssim_global(sr: &Volume, gt: &Volume) -> Result<f64> {
    check_shapes(sr, gt)?;
    ssim_global_with_range(sr, gt, ssim_peak(gt))
}

pub fn ssim_global_with_range(sr: &Volume, gt: &Volume, l: f64) -> Result<f64> {
    check_shapes(sr, gt)?;
    ssim_global_values(&widen(sr), &widen(gt), l)
}

/// SSIM of a 2D slice pair with whole-slice statistics.
pub fn ssim_slice(a: ArrayView2<'_, f32>, b: ArrayView2<'_, f32>, l: f64) -> f64 {
    let (c1, c2) = ssim_constants(l);
    Moments::of(a.iter().zip(b.iter()).map(|(x, y)| (*x as f64, *y as f64))).ssim(c1, c2)
}

/// 3D summed-volume table with a zero border: `t[i+1][j+1][k+1]` is the sum
/// over `[0..=i, 0..=j, 0..=k]`.
fn integral(v: &Array3<f64>) -> Array3<f64> {
    let (d, h, w) = v.dim();
    let mut t = Array3::<f64>::zeros((d + 1, h + 1, w + 1));
    for i in 0..d {
        for j in 0..h {
            for k in 0..w {
                t[[i + 1, j + 1, k + 1]] = v[[i, j, k]] + t[[i, j + 1, k + 1]] + t[[i + 1, j, k + 1]] + t[[i + 1, j + 1, k]]
                    - t[[i, j, k + 1]]
                    - t[[i, j + 1, k]]
                    - t[[i + 1, j, k]]
                    + t[[i, j, k]];
            }
        }
    }
    t
}

fn box_sum(t: &Array3<f64>, lo: [usize; 3], hi: [usize; 3]) -> f64 {
    t[[hi[0], hi[1], hi[2]]] - t[[lo[0], hi[1], hi[2]]] - t[[hi[0], lo[1], hi[2]]] - t[[hi[0], hi[1], lo[2]]]
        + t[[lo[0], lo[1], hi[2]]]
        + t[[lo[0], hi[1], lo[2]]]
        + t[[hi[0], lo[1], lo[2]]]
        - t[[lo[0], lo[1], lo[2]]]
}

/// Mean SSIM over every fully contained `7^3` window (the window shrinks on
/// axes shorter than 7).
pub fn ssim_windowed(sr: &Volume, gt: &Volume) -> Result<f64> {
    check_shapes(sr, gt)?;
    let (c1, c2) = ssim_constants(ssim_peak(gt));
    let (d, h, w) = sr.shape();
    let x = sr.data().mapv(|v| v as f64);
    let y = gt.data().mapv(|v| v as f64);
    // Offset by the global means to keep the running sums well conditioned.
    let (mx, my) = (x.mean().unwrap_or(0.0), y.mean().unwrap_or(0.0));
    let xc = x.mapv(|v| v - mx);
    let yc = y.mapv(|v| v - my);
    let tx = integral(&xc);
    let ty = integral(&yc);
    let txx = integral(&(&xc * &xc));
    let tyy = integral(&(&yc * &yc));
    let txy = integral(&(&xc * &yc));
    let win = [d, h, w].map(|n| n.min(SSIM_WINDOW));
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=d - win[0] {
        for j in 0..=h - win[1] {
            for k in 0..=w - win[2] {
                let lo = [i, j, k];
                let hi = [i + win[0], j + win[1], k + win[2]];
                let n = (win[0] * win[1] * win[2]) as f64;
                let sx = box_sum(&tx, lo, hi);
                let sy = box_sum(&ty, lo, hi);
                let ax = sx / n;
                let ay = sy / n;
                let vx = (box_sum(&txx, lo, hi) / n - ax * ax).max(0.0);
                let vy = (box_sum(&tyy, lo, hi) / n - ay * ay).max(0.0);
                let cov = box_sum(&txy, lo, hi) / n - ax * ay;
                total += ssim_from_stats(ax + mx, ay + my, vx, vy, cov, c1, c2);
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Per-axis and overall means of a 2D metric over all orthogonal slices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceMeans {
    /// Mean over every slice of all three directions.
    pub mean: f64,
    /// Slices orthogonal to axis 0, 1 and 2 of the `(d, h, w)` volume.
    pub per_axis: [f64; 3],
    pub slices: usize,
}

pub fn slicewise_means<F>(metric: F, sr: &Volume, gt: &Volume) -> Result<SliceMeans>
where
    F: Fn(ArrayView2<'_, f32>, ArrayView2<'_, f32>) -> f64,
{
    check_shapes(sr, gt)?;
    let (a, b): (ArrayView3<'_, f32>, ArrayView3<'_, f32>) = (sr.data(), gt.data());
    let mut per_axis = [0.0; 3];
    let mut total = 0.0;
    let mut slices = 0usize;
    for axis in 0..3 {
        let n = a.len_of(Axis(axis));
        let mut sum = 0.0;
        for i in 0..n {
            sum += metric(a.index_axis(Axis(axis), i), b.index_axis(Axis(axis), i));
        }
        per_axis[axis] = sum / n as f64;
        total += sum;
        slices += n;
    }
    Ok(SliceMeans {
        mean: total / slices as f64,
        per_axis,
        slices,
    })
}

/// Mean of a 2D metric over every slice along all three orthogonal axes.
pub fn slicewise_aggregate<F>(metric: F, sr: &Volume, gt: &Volume) -> Result<f64>
where
    F: Fn(ArrayView2<'_, f32>, ArrayView2<'_, f32>) -> f64,
{
    slicewise_means(metric, sr, gt).map(|m| m.mean)
}

/// JSON has no infinity; encode it as a string.
mod score {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub const INFINITE: &str = "infinite (identical images)";

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            Repr::Text(INFINITE.into()).serialize(s)
        } else {
            Repr::Num(*v).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == INFINITE => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("unexpected score '{t}'"))),
        }
    }
}

pub use score::INFINITE as INFINITE_LABEL;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    #[serde(with = "score")]
    pub psnr_paper: f64,
    #[serde(with = "score")]
    pub psnr_standard: f64,
    pub ssim_global: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssim_windowed: Option<f64>,
    /// Slice-by-slice SSIM over the three orthogonal directions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssim_slicewise: Option<SliceMeans>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sr_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_id: Option<String>,
    /// Scores supplied by external tools (e.g. LPIPS); never computed here.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub external: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub windowed: bool,
    pub slicewise: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            windowed: true,
            slicewise: true,
        }
    }
}

pub fn evaluate(sr: &Volume, gt: &Volume, opts: EvalOptions) -> Result<EvalReport> {
    check_shapes(sr, gt)?;
    let l = ssim_peak(gt);
    Ok(EvalReport {
        psnr_paper: psnr_paper(sr, gt)?,
        psnr_standard: psnr_standard(sr, gt)?,
        ssim_global: ssim_global(sr, gt)?,
        ssim_windowed: if opts.windowed { Some(ssim_windowed(sr, gt)?) } else { None },
        ssim_slicewise: if opts.slicewise {
            Some(slicewise_means(|a, b| ssim_slice(a, b, l), sr, gt)?)
        } else {
            None
        },
        ..EvalReport::default()
    })
}

fn cell(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

/// Plain-text table: one row per report (scale), one column per metric.
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>7} | {:>11} | {:>13} | {:>11} | {:>13} | {:>14}",
        "scale", "psnr_paper", "psnr_standard", "ssim_global", "ssim_windowed", "ssim_slicewise"
    );
    let _ = writeln!(out, "{}", "-".repeat(84));
    for r in reports {
        let scale = r.scale.map(|s| format!("{s}x")).unwrap_or_else(|| "-".into());
        let opt = |v: Option<f64>| v.map(cell).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{:>7} | {:>11} | {:>13} | {:>11} | {:>13} | {:>14}",
            scale,
            cell(r.psnr_paper),
            cell(r.psnr_standard),
            cell(r.ssim_global),
            opt(r.ssim_windowed),
            opt(r.ssim_slicewise.map(|s| s.mean)),
        );
    }
    out
}
