//! Convolution and fully connected layers with explicit backward passes.
//!
//! Convolution activations are `(channels, voxels)` matrices over a C-ordered
//! `(d, h, w)` lattice; concatenating along channels is appending rows.
//! Fully connected activations are `(batch, features)`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;

use super::params::{ParamId, ParamStore};
use crate::real::Real;

pub type Dims = (usize, usize, usize);

pub(crate) fn voxels(dims: Dims) -> usize {
    dims.0 * dims.1 * dims.2
}

fn gemm<T: Real>(alpha: T, a: ArrayView2<'_, T>, b: ArrayView2<'_, T>, beta: T, c: &mut ArrayViewMut2<'_, T>) {
    general_mat_mul(alpha, &a, &b, beta, c);
}

/// Uniform init with bound `1 / sqrt(fan_in)`, i.e. Kaiming-uniform with
/// negative slope sqrt(5).
pub(crate) fn init_uniform<T: Real, R: Rng>(data: &mut [T], fan_in: usize, rng: &mut R) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    for x in data {
        *x = T::from_f64_lossy(rng.gen_range(-bound..bound));
    }
}

pub(crate) fn relu_inplace<T: Real>(x: &mut Array2<T>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// Zero the upstream gradient where the post-activation output was clipped.
pub(crate) fn relu_backward_inplace<T: Real>(grad: &mut Array2<T>, activated: ArrayView2<'_, T>) {
    ndarray::Zip::from(grad).and(activated).for_each(|g, &a| {
        if a <= T::zero() {
            *g = T::zero();
        }
    });
}

/// Shifted copy of one row for a kernel tap offset of -1, 0 or +1 along w.
#[inline]
fn shift_copy<T: Real>(dst: &mut [T], src: &[T], dx: isize) {
    let w = dst.len();
    match dx {
        -1 => {
            dst[0] = T::zero();
            dst[1..].copy_from_slice(&src[..w - 1]);
        }
        0 => dst.copy_from_slice(src),
        _ => {
            dst[..w - 1].copy_from_slice(&src[1..]);
            dst[w - 1] = T::zero();
        }
    }
}

#[inline]
fn shift_add<T: Real>(dst: &mut [T], src: &[T], dx: isize) {
    let w = dst.len();
    match dx {
        -1 => {
            for (d, s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                *d += *s;
            }
        }
        0 => {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += *s;
            }
        }
        _ => {
            for (d, s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                *d += *s;
            }
        }
    }
}

/// Unfold 3x3x3 zero-padded neighborhoods: `(cin * 27, voxels)`.
pub(crate) fn im2col<T: Real>(x: ArrayView2<'_, T>, dims: Dims) -> Array2<T> {
    let (d, h, w) = dims;
    let n = voxels(dims);
    let cin = x.nrows();
    let src = x.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let mut col = Array2::<T>::zeros((cin * 27, n));
    let dst = col.as_slice_mut().expect("fresh array");
    for c in 0..cin {
        let plane = &src[c * n..(c + 1) * n];
        for tap in 0..27 {
            let (dz, dy, dx) = (tap as isize / 9 - 1, (tap as isize / 3) % 3 - 1, tap as isize % 3 - 1);
            let row = &mut dst[(c * 27 + tap) * n..(c * 27 + tap + 1) * n];
            for z in 0..d {
                let sz = z as isize + dz;
                if sz < 0 || sz >= d as isize {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let o = (z * h + y) * w;
                    let s = (sz as usize * h + sy as usize) * w;
                    shift_copy(&mut row[o..o + w], &plane[s..s + w], dx);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`].
pub(crate) fn col2im<T: Real>(col: ArrayView2<'_, T>, cin: usize, dims: Dims) -> Array2<T> {
    let (d, h, w) = dims;
    let n = voxels(dims);
    let col = col.as_standard_layout();
    let src = col.as_slice().expect("standard layout");
    let mut x = Array2::<T>::zeros((cin, n));
    let dst = x.as_slice_mut().expect("fresh array");
    for c in 0..cin {
        let plane = &mut dst[c * n..(c + 1) * n];
        for tap in 0..27 {
            let (dz, dy, dx) = (tap as isize / 9 - 1, (tap as isize / 3) % 3 - 1, tap as isize % 3 - 1);
            let row = &src[(c * 27 + tap) * n..(c * 27 + tap + 1) * n];
            for z in 0..d {
                let sz = z as isize + dz;
                if sz < 0 || sz >= d as isize {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let o = (z * h + y) * w;
                    let s = (sz as usize * h + sy as usize) * w;
                    shift_add(&mut plane[s..s + w], &row[o..o + w], dx);
                }
            }
        }
    }
    x
}

/// Same-padded 3D convolution with a cubic kernel of side 1 or 3.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl Conv3d {
    pub fn register<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        debug_assert!(kernel == 1 || kernel == 3);
        let weight = store.add(format!("{name}.weight"), &[cout, cin, kernel, kernel, kernel]);
        let bias = store.add(format!("{name}.bias"), &[cout]);
        Self {
            weight,
            bias,
            cin,
            cout,
            kernel,
        }
    }

    pub fn param_count(cin: usize, cout: usize, kernel: usize) -> usize {
        cout * cin * kernel.pow(3) + cout
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.kernel.pow(3)
    }

    fn weight<'a, T: Real>(&self, store: &'a ParamStore<T>) -> ArrayView2<'a, T> {
        ArrayView2::from_shape((self.cout, self.fan_in()), store.data(self.weight)).expect("weight shape")
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: ArrayView2<'_, T>, dims: Dims) -> Array2<T> {
        debug_assert_eq!(x.nrows(), self.cin);
        let n = voxels(dims);
        let bias = store.data(self.bias);
        let mut y = Array2::<T>::zeros((self.cout, n));
        for (mut row, &b) in y.axis_iter_mut(Axis(0)).zip(bias) {
            row.fill(b);
        }
        let w = self.weight(store);
        if self.kernel == 1 {
            gemm(T::one(), w, x, T::one(), &mut y.view_mut());
        } else {
            let col = im2col(x, dims);
            gemm(T::one(), w, col.view(), T::one(), &mut y.view_mut());
        }
        y
    }

    /// Accumulate parameter gradients and return the input gradient.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        grads: &mut ParamStore<T>,
        x: ArrayView2<'_, T>,
        dims: Dims,
        dy: ArrayView2<'_, T>,
    ) -> Array2<T> {
        let col = if self.kernel == 1 { None } else { Some(im2col(x, dims)) };
        let col_view = col.as_ref().map(|c| c.view()).unwrap_or(x);
        {
            let gw = grads.data_mut(self.weight);
            let mut gw = ArrayViewMut2::from_shape((self.cout, self.fan_in()), gw).expect("weight shape");
            gemm(T::one(), dy, col_view.t(), T::one(), &mut gw);
        }
        {
            let gb = grads.data_mut(self.bias);
            for (g, row) in gb.iter_mut().zip(dy.axis_iter(Axis(0))) {
                *g += row.sum();
            }
        }
        let w = self.weight(store);
        let mut dcol = Array2::<T>::zeros((self.fan_in(), voxels(dims)));
        gemm(T::one(), w.t(), dy, T::zero(), &mut dcol.view_mut());
        if self.kernel == 1 {
            dcol
        } else {
            col2im(dcol.view(), self.cin, dims)
        }
    }
}

/// Fully connected layer, `y = x W^T + b` with `W` shaped `(out, in)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn register<T: Real>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), &[fan_out, fan_in]);
        let bias = store.add(format!("{name}.bias"), &[fan_out]);
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn param_count(fan_in: usize, fan_out: usize) -> usize {
        fan_out * fan_in + fan_out
    }

    fn weight<'a, T: Real>(&self, store: &'a ParamStore<T>) -> ArrayView2<'a, T> {
        ArrayView2::from_shape((self.fan_out, self.fan_in), store.data(self.weight)).expect("weight shape")
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: ArrayView2<'_, T>) -> Array2<T> {
        let mut y = Array2::<T>::zeros((x.nrows(), self.fan_out));
        let bias = ndarray::ArrayView1::from(store.data(self.bias));
        for mut row in y.axis_iter_mut(Axis(0)) {
            row.assign(&bias);
        }
        gemm(T::one(), x, self.weight(store).t(), T::one(), &mut y.view_mut());
        y
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        grads: &mut ParamStore<T>,
        x: ArrayView2<'_, T>,
        dy: ArrayView2<'_, T>,
    ) -> Array2<T> {
        {
            let gw = grads.data_mut(self.weight);
            let mut gw = ArrayViewMut2::from_shape((self.fan_out, self.fan_in), gw).expect("weight shape");
            gemm(T::one(), dy.t(), x, T::one(), &mut gw);
        }
        {
            let gb = grads.data_mut(self.bias);
            for (g, col) in gb.iter_mut().zip(dy.axis_iter(Axis(1))) {
                *g += col.sum();
            }
        }
        let mut dx = Array2::<T>::zeros((x.nrows(), self.fan_in));
        gemm(T::one(), dy, self.weight(store), T::zero(), &mut dx.view_mut());
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct 3x3x3 convolution with zero padding, written without im2col.
    fn naive_conv(x: &Array2<f64>, w: &[f64], b: &[f64], cout: usize, dims: Dims) -> Array2<f64> {
        let (d, h, wd) = dims;
        let cin = x.nrows();
        let mut y = Array2::zeros((cout, voxels(dims)));
        for o in 0..cout {
            for z in 0..d {
                for yy in 0..h {
                    for xx in 0..wd {
                        let mut acc = b[o];
                        for c in 0..cin {
                            for kz in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let (sz, sy, sx) = (z + kz, yy + ky, xx + kx);
                                        if sz < 1 || sy < 1 || sx < 1 || sz > d || sy > h || sx > wd {
                                            continue;
                                        }
                                        let v = x[[c, ((sz - 1) * h + sy - 1) * wd + sx - 1]];
                                        acc += w[(((o * cin + c) * 3 + kz) * 3 + ky) * 3 + kx] * v;
                                    }
                                }
                            }
                        }
                        y[[o, (z * h + yy) * wd + xx]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dims = (3, 4, 5);
        let mut store = ParamStore::<f64>::new();
        let conv = Conv3d::register(&mut store, "c", 2, 3, 3);
        init_uniform(store.data_mut(conv.weight), conv.fan_in(), &mut rng);
        init_uniform(store.data_mut(conv.bias), conv.fan_in(), &mut rng);
        let x = Array2::from_shape_fn((2, voxels(dims)), |_| rng.gen_range(-1.0..1.0));
        let y = conv.forward(&store, x.view(), dims);
        let expect = naive_conv(&x, store.data(conv.weight), store.data(conv.bias), 3, dims);
        for (a, b) in y.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = (2, 3, 4);
        let x = Array2::<f64>::from_shape_fn((3, 24), |_| rng.gen_range(-1.0..1.0));
        let c = Array2::<f64>::from_shape_fn((81, 24), |_| rng.gen_range(-1.0..1.0));
        let lhs = (&im2col(x.view(), dims) * &c).sum();
        let rhs = (&x * &col2im(c.view(), 3, dims)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn width_one_lattice() {
        let dims = (2, 2, 1);
        let x = Array2::<f64>::from_shape_vec((1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let col = im2col(x.view(), dims);
        // centre tap reproduces the input
        assert_eq!(col.row(13).to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        // taps reaching along w only see padding
        assert!(col.row(12).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::register(&mut store, "fc", 4, 3);
        init_uniform(store.data_mut(lin.weight), 4, &mut rng);
        init_uniform(store.data_mut(lin.bias), 4, &mut rng);
        let x = Array2::from_shape_fn((5, 4), |_| rng.gen_range(-1.0..1.0));
        let probe = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0));
        let objective = |s: &ParamStore<f64>, x: &Array2<f64>| (&lin.forward(s, x.view()) * &probe).sum();
        let mut grads = store.zeros_like();
        let dx = lin.backward(&store, &mut grads, x.view(), probe.view());
        let h = 1e-6;
        for i in 0..store.count() {
            let mut p = store.clone();
            let v = p.flat_get(i);
            p.flat_set(i, v + h);
            let up = objective(&p, &x);
            p.flat_set(i, v - h);
            let down = objective(&p, &x);
            assert!(((up - down) / (2.0 * h) - grads.flat_get(i)).abs() < 1e-7);
        }
        for idx in [(0, 0), (2, 3), (4, 1)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let up = objective(&store, &xp);
            xp[idx] -= 2.0 * h;
            let down = objective(&store, &xp);
            assert!(((up - down) / (2.0 * h) - dx[idx]).abs() < 1e-7);
        }
    }
}
