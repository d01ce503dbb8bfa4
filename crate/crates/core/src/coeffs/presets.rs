//! Built-in coefficient fields.
//!
//! Every preset keeps `sigma = I` (so `a = I`, elliptic for any
//! `delta < 1`) and varies the drift:
//!
//! * `zero` - driftless; the truncated dynamics is a pure diffusion.
//! * `constant` - spatially constant drift vector.
//! * `ou` - linear restoring drift `b(x) = -x`.
//! * `bump` - smooth Gaussian-bump drift `b_i(x) = amp_i exp(-|x|^2 / w^2)`.
//! * `singular_power` - `b(x) = c x / |x|^{1 + gamma}` inside `B(r0)`, zero
//!   outside; unbounded at the origin for any `gamma in (0, 1)`. The origin
//!   itself evaluates to zero (a measure-zero choice; the two-sided limit
//!   does not exist, and integral assumptions are insensitive to it).
//! * `custom_grid` - drift and diffusion interpolated from grid samples;
//!   outside the sample box the drift is zero and the diffusion is evaluated
//!   at the componentwise-clamped point (constant extension).

use std::sync::Arc;

use crate::coeffs::CoefficientField;
use crate::error::{Error, Result};
use crate::grid::{GridFunction, Interp};
use crate::real::{norm2, Real};

fn identity_sigma<T: Real>(d: usize) -> super::FieldEval<T> {
    Arc::new(move |_x: &[T], out: &mut [T]| {
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = if i == j { T::one() } else { T::zero() };
            }
        }
    })
}

fn zero_grad_sigma<T: Real>() -> super::FieldEval<T> {
    Arc::new(move |_x: &[T], out: &mut [T]| {
        for o in out.iter_mut() {
            *o = T::zero();
        }
    })
}

/// Driftless field with identity diffusion.
pub fn zero<T: Real>(dim: usize) -> Result<CoefficientField<T>> {
    CoefficientField::new(
        dim,
        dim,
        Arc::new(|_x: &[T], out: &mut [T]| {
            for o in out.iter_mut() {
                *o = T::zero();
            }
        }),
        identity_sigma(dim),
        Some(zero_grad_sigma()),
        Some(T::zero()),
        format!("zero(d={dim})"),
    )
}

/// Constant drift vector with identity diffusion.
pub fn constant<T: Real>(dim: usize, drift: Vec<T>) -> Result<CoefficientField<T>> {
    if drift.len() != dim {
        return Err(Error::Parameter(format!(
            "constant drift has {} components, expected {dim}",
            drift.len()
        )));
    }
    let desc = format!(
        "constant(d={dim},b=[{}])",
        drift
            .iter()
            .map(|v| format!("{}", v.to_f64_lossy()))
            .collect::<Vec<_>>()
            .join(",")
    );
    CoefficientField::new(
        dim,
        dim,
        Arc::new(move |_x: &[T], out: &mut [T]| out.copy_from_slice(&drift)),
        identity_sigma(dim),
        Some(zero_grad_sigma()),
        None,
        desc,
    )
}

/// Linear restoring drift `b(x) = -x` with identity diffusion.
pub fn ou<T: Real>(dim: usize) -> Result<CoefficientField<T>> {
    CoefficientField::new(
        dim,
        dim,
        Arc::new(|x: &[T], out: &mut [T]| {
            for (o, &xi) in out.iter_mut().zip(x) {
                *o = -xi;
            }
        }),
        identity_sigma(dim),
        Some(zero_grad_sigma()),
        None,
        format!("ou(d={dim})"),
    )
}

/// Smooth Gaussian-bump drift `b_i(x) = amp_i exp(-|x|^2 / width^2)`.
pub fn bump<T: Real>(dim: usize, amp: Vec<T>, width: T) -> Result<CoefficientField<T>> {
    if amp.len() != dim {
        return Err(Error::Parameter(format!(
            "bump amplitude has {} components, expected {dim}",
            amp.len()
        )));
    }
    if !(width > T::zero()) {
        return Err(Error::Parameter(format!(
            "bump width must be positive, got {width}"
        )));
    }
    let desc = format!(
        "bump(d={dim},amp=[{}],w={})",
        amp.iter()
            .map(|v| format!("{}", v.to_f64_lossy()))
            .collect::<Vec<_>>()
            .join(","),
        width.to_f64_lossy()
    );
    let w2 = width * width;
    CoefficientField::new(
        dim,
        dim,
        Arc::new(move |x: &[T], out: &mut [T]| {
            let r2: T = x.iter().map(|&v| v * v).sum();
            let e = (-r2 / w2).exp();
            for (o, &a) in out.iter_mut().zip(&amp) {
                *o = a * e;
            }
        }),
        identity_sigma(dim),
        Some(zero_grad_sigma()),
        None,
        desc,
    )
}

/// Power-singular drift `b(x) = c x / |x|^{1 + gamma}` supported in `B(r0)`.
///
/// `|b(x)| = |c| |x|^{-gamma}` blows up at the origin; the field is in
/// `L^{p1}(B(r0))` iff `gamma * p1 < d`.
pub fn singular_power<T: Real>(
    dim: usize,
    c: T,
    gamma: T,
    r0: T,
) -> Result<CoefficientField<T>> {
    if !(gamma > T::zero() && gamma < T::one()) {
        return Err(Error::Parameter(format!(
            "gamma must lie in (0, 1), got {gamma}"
        )));
    }
    if !(r0 > T::zero()) {
        return Err(Error::Parameter(format!(
            "support radius must be positive, got {r0}"
        )));
    }
    if !c.is_finite() {
        return Err(Error::Parameter("amplitude c must be finite".into()));
    }
    let desc = format!(
        "singular_power(d={dim},c={},gamma={},r0={})",
        c.to_f64_lossy(),
        gamma.to_f64_lossy(),
        r0.to_f64_lossy()
    );
    let expo = T::one() + gamma;
    CoefficientField::new(
        dim,
        dim,
        Arc::new(move |x: &[T], out: &mut [T]| {
            let r = norm2(x);
            if r > T::zero() && r <= r0 {
                let scale = c / r.powf(expo);
                for (o, &xi) in out.iter_mut().zip(x) {
                    *o = scale * xi;
                }
            } else {
                for o in out.iter_mut() {
                    *o = T::zero();
                }
            }
        }),
        identity_sigma(dim),
        Some(zero_grad_sigma()),
        Some(r0),
        desc,
    )
}

/// Field interpolated from grid samples: `drift_grid` has arity `d`,
/// `sigma_grid` arity `d * m`. Outside the box the drift is zero and the
/// diffusion is evaluated at the componentwise-clamped point.
pub fn custom_grid<T: Real>(
    drift_grid: GridFunction<T>,
    sigma_grid: GridFunction<T>,
    interp: Interp,
    descriptor: impl Into<String>,
) -> Result<CoefficientField<T>> {
    let d = drift_grid.grid().dim();
    if drift_grid.arity() != d {
        return Err(Error::Parameter(format!(
            "drift mesh has arity {}, expected {d}",
            drift_grid.arity()
        )));
    }
    if sigma_grid.grid() != drift_grid.grid() {
        return Err(Error::Parameter(
            "drift and diffusion meshes must share one grid".into(),
        ));
    }
    if sigma_grid.arity() % d != 0 {
        return Err(Error::Parameter(format!(
            "diffusion mesh arity {} is not a multiple of d = {d}",
            sigma_grid.arity()
        )));
    }
    let m = sigma_grid.arity() / d;
    let drift_grid = Arc::new(drift_grid);
    let sigma_grid = Arc::new(sigma_grid);
    let l_box = drift_grid.grid().l_box();
    let h = drift_grid.grid().h();
    let lim = l_box - h;
    let dg = drift_grid.clone();
    let sg = sigma_grid.clone();
    CoefficientField::new(
        d,
        m,
        Arc::new(move |x: &[T], out: &mut [T]| {
            if !dg.eval_zero_outside(x, interp, 1, out) {
                for o in out.iter_mut() {
                    *o = T::zero();
                }
            }
        }),
        Arc::new(move |x: &[T], out: &mut [T]| {
            let mut clamped = [T::zero(); crate::grid::MAX_DIM];
            let cd = &mut clamped[..x.len()];
            for (c, &xi) in cd.iter_mut().zip(x) {
                *c = xi.max(-lim).min(lim);
            }
            sg.eval(cd, interp, out);
        }),
        None,
        None,
        descriptor.into(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    #[test]
    fn singular_power_profile() {
        let f = singular_power::<f64>(1, 1.0, 0.5, 1.0).unwrap();
        let mut b = [0.0];
        f.drift(&[0.25], &mut b);
        // c x / |x|^{3/2} = 0.25 / 0.125 = 2.
        assert!((b[0] - 2.0).abs() < 1e-12);
        f.drift(&[-0.25], &mut b);
        assert!((b[0] + 2.0).abs() < 1e-12);
        f.drift(&[0.0], &mut b);
        assert_eq!(b[0], 0.0);
        f.drift(&[1.5], &mut b);
        assert_eq!(b[0], 0.0);
        assert!(singular_power::<f64>(1, 1.0, 1.5, 1.0).is_err());
    }

    #[test]
    fn ou_and_bump_profiles() {
        let f = ou::<f64>(2).unwrap();
        let mut b = [0.0; 2];
        f.drift(&[0.3, -1.1], &mut b);
        assert_eq!(b, [-0.3, 1.1]);

        let g = bump::<f64>(1, vec![2.0], 1.0).unwrap();
        let mut b1 = [0.0];
        g.drift(&[0.0], &mut b1);
        assert_eq!(b1[0], 2.0);
        g.drift(&[1.0], &mut b1);
        assert!((b1[0] - 2.0 * (-1.0f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn a_is_identity_for_presets() {
        let f = zero::<f64>(3).unwrap();
        let mut a = [0.0; 9];
        f.a(&[0.1, 0.2, 0.3], &mut a);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_eq!(a[i * 3 + j], expect);
            }
        }
    }

    #[test]
    fn custom_grid_interpolates_and_extends() {
        let g = Grid::<f64>::new(1, 32, 2.0).unwrap();
        let drift = GridFunction::from_fn(g, 1, |x, out| out[0] = x[0]).unwrap();
        let sigma = GridFunction::from_fn(g, 1, |_x, out| out[0] = 1.5).unwrap();
        let f = custom_grid(drift, sigma, Interp::Linear, "mesh test").unwrap();
        let mut b = [0.0];
        f.drift(&[0.5], &mut b);
        assert!((b[0] - 0.5).abs() < 1e-12);
        f.drift(&[5.0], &mut b);
        assert_eq!(b[0], 0.0);
        let mut s = [0.0];
        f.diffusion(&[5.0], &mut s);
        assert!((s[0] - 1.5).abs() < 1e-12);
    }
}
