//! n-dimensional FFT on the periodic grid, plus frequency bookkeeping.
//!
//! The box is `[-L, L)^d`, so the fundamental angular frequency is
//! `pi / L` and mode `j` on an axis carries the continuum wavenumber
//! `xi_j = pi * wrap(j) / L` where `wrap` folds `j >= n/2` to the negative
//! branch. The discrete symbol of the 3-point second difference on an axis is
//! `-4 sin^2(pi j / n) / h^2`; solvers that precondition with a
//! constant-coefficient operator use the discrete symbol so the
//! preconditioner matches the stencil exactly.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::grid::Grid;
use crate::real::Real;

/// In-place FFT over all axes of a row-major complex buffer with the given
/// shape (axis 0 slowest). `inverse` applies the conjugate transform and the
/// `1 / npts` normalization, so forward-then-inverse is the identity.
pub fn fft_nd<T: Real>(data: &mut [Complex<T>], shape: &[usize], inverse: bool) {
    let npts: usize = shape.iter().product();
    debug_assert_eq!(data.len(), npts);
    let mut planner = FftPlanner::<T>::new();
    let dim = shape.len();
    // Strides for row-major layout, axis 0 slowest.
    let mut strides = vec![0usize; dim];
    for axis in 0..dim {
        strides[axis] = shape[axis + 1..].iter().product();
    }
    for axis in 0..dim {
        let n = shape[axis];
        let fft = if inverse {
            planner.plan_fft_inverse(n)
        } else {
            planner.plan_fft_forward(n)
        };
        let stride = strides[axis];
        let lines = npts / n;
        let mut scratch = vec![Complex::new(T::zero(), T::zero()); n];
        for line in 0..lines {
            // Decompose the line id into (outer, inner) around this axis.
            let inner = line % stride;
            let outer = line / stride;
            let base = outer * stride * n + inner;
            for k in 0..n {
                scratch[k] = data[base + k * stride];
            }
            fft.process(&mut scratch);
            for k in 0..n {
                data[base + k * stride] = scratch[k];
            }
        }
    }
    if inverse {
        let scale = T::one() / T::of(npts as f64);
        for v in data.iter_mut() {
            *v = *v * scale;
        }
    }
}

/// Real buffer to complex spectrum (forward transform).
pub fn forward_real<T: Real>(values: &[T], shape: &[usize]) -> Vec<Complex<T>> {
    let mut data: Vec<Complex<T>> = values
        .iter()
        .map(|&v| Complex::new(v, T::zero()))
        .collect();
    fft_nd(&mut data, shape, false);
    data
}

/// Complex spectrum back to the real parts of the inverse transform.
pub fn inverse_to_real<T: Real>(mut data: Vec<Complex<T>>, shape: &[usize]) -> Vec<T> {
    fft_nd(&mut data, shape, true);
    data.into_iter().map(|c| c.re).collect()
}

/// Signed mode number: folds `j` in `0..n` to `-n/2..n/2`.
#[inline]
pub fn signed_mode(j: usize, n: usize) -> i64 {
    if j <= n / 2 {
        j as i64
    } else {
        j as i64 - n as i64
    }
}

/// Continuum wavenumber of mode `j` on an axis: `pi * signed_mode / L`.
#[inline]
pub fn wavenumber<T: Real>(j: usize, n: usize, l_box: T) -> T {
    T::PI() * T::of(signed_mode(j, n) as f64) / l_box
}

/// Squared continuum wavenumber `|xi|^2` of the flat mode index.
pub fn xi_squared<T: Real>(grid: &Grid<T>, idx: usize) -> T {
    let n = grid.n();
    let mut s = T::zero();
    let mut rem = idx;
    for axis in 0..grid.dim() {
        let stride = grid.n().pow((grid.dim() - 1 - axis) as u32);
        let j = (rem / stride) % n;
        rem %= stride;
        let xi = wavenumber(j, n, grid.l_box());
        s += xi * xi;
    }
    s
}

/// Discrete symbol of the 3-point Laplacian at the flat mode index:
/// `sum_axis -4 sin^2(pi j_axis / n) / h^2` (non-positive).
pub fn discrete_laplacian_symbol<T: Real>(grid: &Grid<T>, idx: usize) -> T {
    let n = grid.n();
    let h2 = grid.h() * grid.h();
    let mut s = T::zero();
    let mut rem = idx;
    for axis in 0..grid.dim() {
        let stride = grid.n().pow((grid.dim() - 1 - axis) as u32);
        let j = (rem / stride) % n;
        rem %= stride;
        let sin = (T::PI() * T::of(j as f64) / T::of(n as f64)).sin();
        s -= T::of(4.0) * sin * sin / h2;
    }
    s
}

/// Periodic convolution of `values` with `kernel` (both length-npts real
/// buffers on the same grid), exact on the grid via the convolution theorem.
/// The kernel is indexed with offset 0 at flat index 0 and wraps.
pub fn periodic_convolve<T: Real>(values: &[T], kernel: &[T], shape: &[usize]) -> Vec<T> {
    let mut a = forward_real(values, shape);
    let b = forward_real(kernel, shape);
    for (x, y) in a.iter_mut().zip(&b) {
        *x = *x * *y;
    }
    inverse_to_real(a, shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_inverse_round_trip() {
        let shape = [16usize, 8];
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|i| ((i * 37 % 101) as f64) * 0.01 - 0.5).collect();
        let spec = forward_real(&values, &shape);
        let back = inverse_to_real(spec, &shape);
        for (a, b) in values.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn plane_wave_lands_on_a_single_mode() {
        let g = Grid::<f64>::new(1, 32, 2.0).unwrap();
        let k = wavenumber(3usize, 32, 2.0);
        let mut values = vec![0.0; 32];
        let mut x = [0.0];
        for idx in 0..32 {
            g.point_of(idx, &mut x);
            values[idx] = (k * x[0]).cos();
        }
        let spec = forward_real(&values, &[32]);
        // cos splits into modes 3 and 29, each of magnitude n/2.
        for (j, c) in spec.iter().enumerate() {
            let mag = (c.re * c.re + c.im * c.im).sqrt();
            if j == 3 || j == 29 {
                assert!((mag - 16.0).abs() < 1e-9, "mode {j} magnitude {mag}");
            } else {
                assert!(mag < 1e-9, "mode {j} magnitude {mag}");
            }
        }
    }

    #[test]
    fn convolution_with_delta_is_identity() {
        let shape = [8usize, 8];
        let n = 64;
        let values: Vec<f64> = (0..n).map(|i| (i as f64).cos()).collect();
        let mut kernel = vec![0.0; n];
        kernel[0] = 1.0;
        let out = periodic_convolve(&values, &kernel, &shape);
        for (a, b) in values.iter().zip(&out) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn discrete_symbol_matches_stencil_on_a_mode() {
        let g = Grid::<f64>::new(1, 32, 3.0).unwrap();
        let h = g.h();
        let j = 5usize;
        let k = wavenumber(j, 32, 3.0);
        // Apply the 3-point stencil to cos(kx) at x=0 and compare.
        let stencil = ((k * h).cos() - 1.0) * 2.0 / (h * h);
        let symbol = discrete_laplacian_symbol(&g, j);
        assert!((stencil - symbol).abs() < 1e-10);
    }
}
