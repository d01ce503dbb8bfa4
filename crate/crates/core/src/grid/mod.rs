//! Periodic tensor grids and grid-sampled functions.
//!
//! All field data lives on a uniform periodic grid over the box
//! `[-L, L)^d` with `n` cells per axis (n a power of two, so the spectral
//! layer can transform without padding). Values are stored component-major:
//! component `c` of a function with `arity` components occupies
//! `values[c * npts .. (c + 1) * npts]`, and within a component the grid
//! index is row-major with axis 0 slowest.
//!
//! Coordinates: cell `i` on an axis sits at `x = -L + i * h` with
//! `h = 2 L / n`. Interpolation and finite differences wrap periodically;
//! callers that need compact support handle the margin themselves (see
//! [`GridFunction::eval_zero_outside`]).

pub mod io;

use crate::error::{Error, Result};
use crate::real::Real;

/// Maximum supported spatial dimension.
pub const MAX_DIM: usize = 3;

/// Uniform periodic grid on `[-l_box, l_box)^dim`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid<T> {
    dim: usize,
    n: usize,
    l_box: T,
    h: T,
    npts: usize,
    strides: [usize; MAX_DIM],
}

impl<T: Real> Grid<T> {
    /// New grid; `dim` in 1..=3, `n` a power of two >= 16, `l_box > 0`.
    pub fn new(dim: usize, n: usize, l_box: T) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::Parameter(format!(
                "grid dimension must be 1..=3, got {dim}"
            )));
        }
        if !n.is_power_of_two() || n < 16 {
            return Err(Error::Parameter(format!(
                "grid resolution must be a power of two >= 16, got {n}"
            )));
        }
        if !(l_box > T::zero()) || !l_box.is_finite() {
            return Err(Error::Parameter(format!(
                "box half-width must be positive and finite, got {l_box}"
            )));
        }
        let npts = n.pow(dim as u32);
        let mut strides = [0usize; MAX_DIM];
        for axis in 0..dim {
            strides[axis] = n.pow((dim - 1 - axis) as u32);
        }
        let h = (T::of(2.0) * l_box) / T::of(n as f64);
        Ok(Grid {
            dim,
            n,
            l_box,
            h,
            npts,
            strides,
        })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn l_box(&self) -> T {
        self.l_box
    }

    /// Mesh width `2 l_box / n`.
    #[inline]
    pub fn h(&self) -> T {
        self.h
    }

    #[inline]
    pub fn npts(&self) -> usize {
        self.npts
    }

    /// Cell volume `h^dim`.
    #[inline]
    pub fn cell_volume(&self) -> T {
        let mut v = T::one();
        for _ in 0..self.dim {
            v *= self.h;
        }
        v
    }

    /// Shape as a slice of per-axis lengths (all equal to `n`).
    pub fn shape(&self) -> Vec<usize> {
        vec![self.n; self.dim]
    }

    /// Flat index of a multi-index (entries already in `0..n`).
    #[inline]
    pub fn index_of(&self, multi: &[usize]) -> usize {
        let mut idx = 0;
        for axis in 0..self.dim {
            idx += multi[axis] * self.strides[axis];
        }
        idx
    }

    /// Multi-index of a flat index.
    #[inline]
    pub fn multi_of(&self, idx: usize, out: &mut [usize]) {
        for axis in 0..self.dim {
            out[axis] = (idx / self.strides[axis]) % self.n;
        }
    }

    /// Coordinates of the grid point with flat index `idx`.
    #[inline]
    pub fn point_of(&self, idx: usize, out: &mut [T]) {
        for axis in 0..self.dim {
            let i = (idx / self.strides[axis]) % self.n;
            out[axis] = -self.l_box + T::of(i as f64) * self.h;
        }
    }

    /// Periodic neighbor: flat index shifted by `step` cells along `axis`.
    #[inline]
    pub fn shift(&self, idx: usize, axis: usize, step: isize) -> usize {
        let stride = self.strides[axis];
        let i = (idx / stride) % self.n;
        let j = (i as isize + step).rem_euclid(self.n as isize) as usize;
        idx + (j * stride) - (i * stride)
    }

    /// Periodic distance between two points of the box (shortest image).
    pub fn periodic_distance(&self, a: &[T], b: &[T]) -> T {
        let period = T::of(2.0) * self.l_box;
        let mut s = T::zero();
        for axis in 0..self.dim {
            let mut d = (a[axis] - b[axis]).abs() % period;
            if d > self.l_box {
                d = period - d;
            }
            s += d * d;
        }
        s.sqrt()
    }
}

/// Interpolation rule for off-grid evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    /// Multilinear over the enclosing cell (2^d corners).
    Linear,
    /// Catmull-Rom cubic per axis (4^d corners), C^1 and exact on linears.
    Cubic,
}

impl Interp {
    pub fn name(self) -> &'static str {
        match self {
            Interp::Linear => "linear",
            Interp::Cubic => "cubic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Interp::Linear),
            "cubic" => Ok(Interp::Cubic),
            other => Err(Error::Parameter(format!(
                "unknown interpolation rule `{other}` (expected `linear` or `cubic`)"
            ))),
        }
    }
}

/// Function sampled on a [`Grid`], `arity` components per point.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction<T> {
    grid: Grid<T>,
    arity: usize,
    values: Vec<T>,
}

impl<T: Real> GridFunction<T> {
    /// All-zero function with the given component count.
    pub fn zeros(grid: Grid<T>, arity: usize) -> Result<Self> {
        if arity == 0 {
            return Err(Error::Parameter("arity must be positive".into()));
        }
        Ok(GridFunction {
            grid,
            arity,
            values: vec![T::zero(); arity * grid.npts()],
        })
    }

    /// Sample a closure: `f(point, out)` fills `arity` components per point.
    pub fn from_fn(
        grid: Grid<T>,
        arity: usize,
        mut f: impl FnMut(&[T], &mut [T]),
    ) -> Result<Self> {
        let mut gf = Self::zeros(grid, arity)?;
        let npts = grid.npts();
        let mut x = [T::zero(); MAX_DIM];
        let mut buf = vec![T::zero(); arity];
        for idx in 0..npts {
            grid.point_of(idx, &mut x[..grid.dim()]);
            f(&x[..grid.dim()], &mut buf);
            for c in 0..arity {
                gf.values[c * npts + idx] = buf[c];
            }
        }
        Ok(gf)
    }

    /// Wrap existing component-major values (length must be `arity * npts`).
    pub fn from_values(grid: Grid<T>, arity: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != arity * grid.npts() {
            return Err(Error::Parameter(format!(
                "value buffer has length {}, expected {}",
                values.len(),
                arity * grid.npts()
            )));
        }
        Ok(GridFunction {
            grid,
            arity,
            values,
        })
    }

    #[inline]
    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    #[inline]
    pub fn arity(&self) -> usize {
        self.arity
    }

    #[inline]
    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    /// One component as a contiguous slice of `npts` values.
    #[inline]
    pub fn component(&self, c: usize) -> &[T] {
        let npts = self.grid.npts();
        &self.values[c * npts..(c + 1) * npts]
    }

    #[inline]
    pub fn component_mut(&mut self, c: usize) -> &mut [T] {
        let npts = self.grid.npts();
        &mut self.values[c * npts..(c + 1) * npts]
    }

    /// Value of component `c` at grid point `idx`.
    #[inline]
    pub fn at(&self, c: usize, idx: usize) -> T {
        self.values[c * self.grid.npts() + idx]
    }

    /// Maximum absolute value over all points and components.
    pub fn max_abs(&self) -> T {
        self.values
            .iter()
            .fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    /// Maximum over points of the Euclidean norm across components.
    pub fn max_pointwise_norm(&self) -> T {
        let npts = self.grid.npts();
        let mut m = T::zero();
        for idx in 0..npts {
            let mut s = T::zero();
            for c in 0..self.arity {
                let v = self.values[c * npts + idx];
                s += v * v;
            }
            m = m.max(s.sqrt());
        }
        m
    }

    /// Periodic interpolation at an arbitrary point; fills `out` (`arity`).
    pub fn eval(&self, x: &[T], interp: Interp, out: &mut [T]) {
        debug_assert_eq!(x.len(), self.grid.dim());
        debug_assert_eq!(out.len(), self.arity);
        match interp {
            Interp::Linear => self.eval_linear(x, out),
            Interp::Cubic => self.eval_cubic(x, out),
        }
    }

    /// Interpolate, but return zeros (and `false`) outside the box interior
    /// minus a `margin`-cell rim. Compactly supported fields use this so a
    /// wandering path sees an exact zero instead of a periodic ghost image.
    pub fn eval_zero_outside(&self, x: &[T], interp: Interp, margin: usize, out: &mut [T]) -> bool {
        let lim = self.grid.l_box() - T::of(margin as f64) * self.grid.h();
        for axis in 0..self.grid.dim() {
            if x[axis].abs() > lim {
                for o in out.iter_mut() {
                    *o = T::zero();
                }
                return false;
            }
        }
        self.eval(x, interp, out);
        true
    }

    fn eval_linear(&self, x: &[T], out: &mut [T]) {
        let g = &self.grid;
        let d = g.dim();
        let n = g.n();
        let npts = g.npts();
        let mut base = [0usize; MAX_DIM];
        let mut frac = [T::zero(); MAX_DIM];
        for axis in 0..d {
            let u = (x[axis] + g.l_box()) / g.h();
            let fl = u.floor();
            frac[axis] = u - fl;
            let i = fl.to_f64_lossy() as i64;
            base[axis] = i.rem_euclid(n as i64) as usize;
        }
        for o in out.iter_mut() {
            *o = T::zero();
        }
        let corners = 1usize << d;
        for corner in 0..corners {
            let mut w = T::one();
            let mut idx = 0usize;
            for axis in 0..d {
                let up = (corner >> axis) & 1;
                let i = if up == 1 {
                    (base[axis] + 1) % n
                } else {
                    base[axis]
                };
                w *= if up == 1 {
                    frac[axis]
                } else {
                    T::one() - frac[axis]
                };
                idx += i * g.strides[axis];
            }
            if w != T::zero() {
                for c in 0..self.arity {
                    out[c] += w * self.values[c * npts + idx];
                }
            }
        }
    }

    fn eval_cubic(&self, x: &[T], out: &mut [T]) {
        let g = &self.grid;
        let d = g.dim();
        let n = g.n();
        let npts = g.npts();
        let mut base = [0i64; MAX_DIM];
        let mut w = [[T::zero(); 4]; MAX_DIM];
        let half = T::of(0.5);
        for axis in 0..d {
            let u = (x[axis] + g.l_box()) / g.h();
            let fl = u.floor();
            let t = u - fl;
            let t2 = t * t;
            let t3 = t2 * t;
            // Catmull-Rom weights; sum to one, exact on linear data.
            w[axis][0] = half * (-t + T::of(2.0) * t2 - t3);
            w[axis][1] = half * (T::of(2.0) - T::of(5.0) * t2 + T::of(3.0) * t3);
            w[axis][2] = half * (t + T::of(4.0) * t2 - T::of(3.0) * t3);
            w[axis][3] = half * (-t2 + t3);
            base[axis] = fl.to_f64_lossy() as i64;
        }
        for o in out.iter_mut() {
            *o = T::zero();
        }
        let corners = 4usize.pow(d as u32);
        for corner in 0..corners {
            let mut cw = T::one();
            let mut idx = 0usize;
            let mut rem = corner;
            for axis in 0..d {
                let off = rem % 4;
                rem /= 4;
                cw *= w[axis][off];
                let i = (base[axis] + off as i64 - 1).rem_euclid(n as i64) as usize;
                idx += i * g.strides[axis];
            }
            if cw != T::zero() {
                for c in 0..self.arity {
                    out[c] += cw * self.values[c * npts + idx];
                }
            }
        }
    }

    /// Centered-difference gradient. Input arity `k` yields arity `k * dim`,
    /// component `c * dim + axis` holding the axis-derivative of component `c`.
    pub fn fd_gradient(&self) -> GridFunction<T> {
        let g = self.grid;
        let d = g.dim();
        let npts = g.npts();
        let two_h = T::of(2.0) * g.h();
        let mut out = GridFunction::zeros(g, self.arity * d).expect("arity positive");
        for c in 0..self.arity {
            let src = self.component(c);
            for axis in 0..d {
                let dst_c = c * d + axis;
                for idx in 0..npts {
                    let up = g.shift(idx, axis, 1);
                    let dn = g.shift(idx, axis, -1);
                    out.values[dst_c * npts + idx] = (src[up] - src[dn]) / two_h;
                }
            }
        }
        out
    }

    /// Centered-difference Hessian of each component. Input arity `k` yields
    /// arity `k * dim * dim`, component `(c * dim + i) * dim + j` holding the
    /// (i, j) second derivative of component `c`. Diagonal entries use the
    /// 3-point stencil, off-diagonal the 4-point cross.
    pub fn fd_hessian(&self) -> GridFunction<T> {
        let g = self.grid;
        let d = g.dim();
        let npts = g.npts();
        let h2 = g.h() * g.h();
        let four_h2 = T::of(4.0) * h2;
        let mut out = GridFunction::zeros(g, self.arity * d * d).expect("arity positive");
        for c in 0..self.arity {
            let src = self.component(c).to_vec();
            for i in 0..d {
                for j in 0..d {
                    let dst_c = (c * d + i) * d + j;
                    let dst = out.component_mut(dst_c);
                    if i == j {
                        for idx in 0..npts {
                            let up = g.shift(idx, i, 1);
                            let dn = g.shift(idx, i, -1);
                            dst[idx] = (src[up] - T::of(2.0) * src[idx] + src[dn]) / h2;
                        }
                    } else {
                        for idx in 0..npts {
                            let pp = g.shift(g.shift(idx, i, 1), j, 1);
                            let pm = g.shift(g.shift(idx, i, 1), j, -1);
                            let mp = g.shift(g.shift(idx, i, -1), j, 1);
                            let mm = g.shift(g.shift(idx, i, -1), j, -1);
                            dst[idx] = (src[pp] - src[pm] - src[mp] + src[mm]) / four_h2;
                        }
                    }
                }
            }
        }
        out
    }

    /// In-place linear combination `self = self * a + other * b`.
    pub fn axpy(&mut self, a: T, other: &GridFunction<T>, b: T) {
        debug_assert_eq!(self.values.len(), other.values.len());
        for (s, &o) in self.values.iter_mut().zip(&other.values) {
            *s = *s * a + o * b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rejects_bad_parameters() {
        assert!(Grid::<f64>::new(0, 32, 1.0).is_err());
        assert!(Grid::<f64>::new(4, 32, 1.0).is_err());
        assert!(Grid::<f64>::new(1, 24, 1.0).is_err());
        assert!(Grid::<f64>::new(1, 8, 1.0).is_err());
        assert!(Grid::<f64>::new(1, 32, 0.0).is_err());
        assert!(Grid::<f64>::new(2, 32, 3.0).is_ok());
    }

    #[test]
    fn index_round_trip_and_shift() {
        let g = Grid::<f64>::new(3, 16, 2.0).unwrap();
        let mut multi = [0usize; 3];
        for idx in [0usize, 1, 16, 255, 4095] {
            g.multi_of(idx, &mut multi);
            assert_eq!(g.index_of(&multi), idx);
        }
        // Wraparound at both ends of each axis.
        let m0 = [0usize, 5, 15];
        let idx = g.index_of(&m0);
        assert_eq!(g.shift(idx, 0, -1), g.index_of(&[15, 5, 15]));
        assert_eq!(g.shift(idx, 2, 1), g.index_of(&[0, 5, 0]));
    }

    #[test]
    fn points_cover_the_box() {
        let g = Grid::<f64>::new(1, 16, 4.0).unwrap();
        let mut x = [0.0];
        g.point_of(0, &mut x);
        assert_eq!(x[0], -4.0);
        g.point_of(15, &mut x);
        assert!((x[0] - 3.5).abs() < 1e-15);
        assert!((g.h() - 0.5).abs() < 1e-15);
        assert!((g.cell_volume() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn linear_interpolation_reproduces_linears_inside() {
        let g = Grid::<f64>::new(2, 32, 2.0).unwrap();
        let f = GridFunction::from_fn(g, 1, |x, out| out[0] = 1.0 + 2.0 * x[0] - 0.5 * x[1])
            .unwrap();
        let mut out = [0.0];
        for &(x, y) in &[(0.13, -0.71), (1.0, 1.0), (-1.3, 0.9)] {
            f.eval(&[x, y], Interp::Linear, &mut out);
            assert!((out[0] - (1.0 + 2.0 * x - 0.5 * y)).abs() < 1e-12);
        }
    }

    #[test]
    fn cubic_interpolation_is_exact_on_grid_and_on_linears() {
        let g = Grid::<f64>::new(1, 32, 2.0).unwrap();
        let f = GridFunction::from_fn(g, 1, |x, out| out[0] = 0.3 - 1.7 * x[0]).unwrap();
        let mut out = [0.0];
        f.eval(&[0.55], Interp::Cubic, &mut out);
        assert!((out[0] - (0.3 - 1.7 * 0.55)).abs() < 1e-12);
        // On-grid evaluation returns the stored sample.
        f.eval(&[-2.0 + 3.0 * g.h()], Interp::Cubic, &mut out);
        assert!((out[0] - f.at(0, 3)).abs() < 1e-12);
    }

    #[test]
    fn cubic_beats_linear_on_smooth_data() {
        let g = Grid::<f64>::new(1, 64, 3.0).unwrap();
        let f = GridFunction::from_fn(g, 1, |x, out| out[0] = (x[0]).sin()).unwrap();
        let mut lin = [0.0];
        let mut cub = [0.0];
        let mut err_lin = 0.0f64;
        let mut err_cub = 0.0f64;
        for k in 0..200 {
            let x = -2.5 + 5.0 * (k as f64) / 199.0;
            f.eval(&[x], Interp::Linear, &mut lin);
            f.eval(&[x], Interp::Cubic, &mut cub);
            err_lin = err_lin.max((lin[0] - x.sin()).abs());
            err_cub = err_cub.max((cub[0] - x.sin()).abs());
        }
        assert!(err_cub < err_lin / 10.0, "cubic {err_cub} vs linear {err_lin}");
    }

    #[test]
    fn eval_zero_outside_margin() {
        let g = Grid::<f64>::new(1, 32, 2.0).unwrap();
        let f = GridFunction::from_fn(g, 1, |_, out| out[0] = 1.0).unwrap();
        let mut out = [0.5];
        assert!(!f.eval_zero_outside(&[1.99], Interp::Linear, 1, &mut out));
        assert_eq!(out[0], 0.0);
        assert!(f.eval_zero_outside(&[0.5], Interp::Linear, 1, &mut out));
        assert_eq!(out[0], 1.0);
    }

    #[test]
    fn gradient_and_hessian_match_smooth_derivatives() {
        let g = Grid::<f64>::new(2, 128, 3.0).unwrap();
        // Compactly supported bump keeps periodic wrap harmless.
        let f = GridFunction::from_fn(g, 1, |x, out| {
            let r2 = x[0] * x[0] + x[1] * x[1];
            out[0] = (-r2).exp();
        })
        .unwrap();
        let grad = f.fd_gradient();
        let hess = f.fd_hessian();
        let mut multi = [0usize; 3];
        let mut x = [0.0; 2];
        // Probe an interior point.
        multi[0] = 70;
        multi[1] = 58;
        let idx = g.index_of(&multi[..2]);
        g.point_of(idx, &mut x);
        let r2 = x[0] * x[0] + x[1] * x[1];
        let e = (-r2).exp();
        let gx = -2.0 * x[0] * e;
        let hxy = 4.0 * x[0] * x[1] * e;
        let hxx = (4.0 * x[0] * x[0] - 2.0) * e;
        // Truncation error of the centered stencils is O(h^2) ~ 2e-3 here.
        assert!((grad.at(0, idx) - gx).abs() < 1e-3);
        assert!((hess.at(1, idx) - hxy).abs() < 6e-3);
        assert!((hess.at(0, idx) - hxx).abs() < 6e-3);
    }

    #[test]
    fn f32_instantiation_smoke() {
        let g = Grid::<f32>::new(1, 16, 1.0).unwrap();
        let f = GridFunction::from_fn(g, 1, |x, out| out[0] = x[0]).unwrap();
        let mut out = [0.0f32];
        f.eval(&[0.25f32], Interp::Linear, &mut out);
        assert!((out[0] - 0.25).abs() < 1e-6);
    }
}
