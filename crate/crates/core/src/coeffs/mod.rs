//! Coefficient fields, truncation, and assumption audits.
//!
//! The input data is a drift `b : R^d -> R^d` and a diffusion
//! `sigma : R^d -> R^{d x m}` with `a = sigma sigma^T` uniformly elliptic:
//! `delta |xi|^2 <= <a xi, xi> <= delta^{-1} |xi|^2` for some
//! `delta in (0, 1)`. The drift may be locally singular; what the theory
//! needs is a logarithmic growth budget on ball-wise `L^{p1}` norms
//! ([`growth_envelope`], audited by [`audit_assumptions`]).
//!
//! Truncation localizes the problem to a ball of radius `R >= 1`:
//!
//! * the drift is cut off sharply, `b_R = b . 1_{|x| <= R}`;
//! * the diffusion is widened to `sigma_R = [rho_R sigma, h_R sigma_bar]`
//!   with `sigma_bar = delta^{-1/2} I`, where [`cutoff_h`] ramps 0 -> 1
//!   across `[R, 2R]` and [`cutoff_rho`] ramps 1 -> 0 across `[2R, 3R]`.
//!
//! The resulting `a_R = rho_R^2 a + h_R^2 delta^{-1} I` interpolates between
//! the original diffusion inside `B(R)` and the constant isotropic far field
//! `delta^{-1} I` outside `B(3R)`, never losing ellipticity:
//! `(delta / 2) |xi|^2 <= <a_R xi, xi> <= 2 delta^{-1} |xi|^2`. Both cutoffs
//! are piecewise-quadratic C^1 splines whose Holder seminorms are bounded by
//! explicit constants (8 and 12 for Holder exponents in (0, 1]), which is
//! what keeps the truncated coefficients inside the regularity class the
//! resolvent estimates need.

pub mod presets;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::real::{norm2, Real};

/// Pointwise evaluation closure: fills a fixed-arity output buffer.
pub type FieldEval<T> = Arc<dyn Fn(&[T], &mut [T]) + Send + Sync>;

/// Standing scalar assumptions for the regularization argument.
#[derive(Debug, Clone, Copy)]
pub struct AssumptionParams<T> {
    /// Integrability exponent of the drift; must exceed the dimension.
    pub p1: T,
    /// Slope of the logarithmic growth envelope.
    pub beta: T,
    /// Offset of the logarithmic growth envelope.
    pub beta_tilde: T,
    /// Ellipticity constant of `a = sigma sigma^T`, in (0, 1).
    pub delta: T,
    /// Holder exponent used for the cutoff regularity bounds, in (0, 1).
    pub varpi: T,
}

impl<T: Real> AssumptionParams<T> {
    /// Validate against the spatial dimension.
    pub fn validate(&self, dim: usize) -> Result<()> {
        let d = T::of(dim as f64);
        if !(self.p1 > d) {
            return Err(Error::Parameter(format!(
                "p1 must exceed d (got p1 = {}, d = {dim})",
                self.p1
            )));
        }
        if !(self.delta > T::zero() && self.delta < T::one()) {
            return Err(Error::Parameter(format!(
                "delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        if !(self.varpi > T::zero() && self.varpi < T::one()) {
            return Err(Error::Parameter(format!(
                "varpi must lie in (0, 1), got {}",
                self.varpi
            )));
        }
        if self.beta < T::zero() {
            return Err(Error::Parameter(format!(
                "beta must be nonnegative, got {}",
                self.beta
            )));
        }
        if !(self.beta_tilde > T::zero()) {
            return Err(Error::Parameter(format!(
                "beta_tilde must be positive, got {}",
                self.beta_tilde
            )));
        }
        Ok(())
    }
}

/// Outward blend: 0 on `B(R)`, 1 outside `B(2R)`, C^1 quadratic spline in
/// between (value 1/2 at `|x| = 3R/2`). Gradient bounded by `2 / R`.
///
/// Callers guarantee `r >= 1`; [`truncate`] validates it once.
#[inline]
pub fn cutoff_h<T: Real>(r: T, x_norm: T) -> T {
    debug_assert!(r >= T::one());
    let two = T::of(2.0);
    let r2 = r * r;
    if x_norm <= r {
        T::zero()
    } else if x_norm <= r + r / two {
        let s = x_norm - r;
        two / r2 * s * s
    } else if x_norm <= two * r {
        let s = x_norm - two * r;
        T::one() - two / r2 * s * s
    } else {
        T::one()
    }
}

/// Inward blend: 1 on `B(2R)`, 0 outside `B(3R)`, the mirror image of
/// [`cutoff_h`] shifted outward by `R` (value 1/2 at `|x| = 5R/2`).
/// Gradient bounded by `2 / R`.
#[inline]
pub fn cutoff_rho<T: Real>(r: T, x_norm: T) -> T {
    debug_assert!(r >= T::one());
    let two = T::of(2.0);
    let three = T::of(3.0);
    let r2 = r * r;
    if x_norm <= two * r {
        T::one()
    } else if x_norm <= two * r + r / two {
        let s = x_norm - two * r;
        T::one() - two / r2 * s * s
    } else if x_norm <= three * r {
        let s = x_norm - three * r;
        two / r2 * s * s
    } else {
        T::zero()
    }
}

/// Which coefficient a growth envelope budgets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvelopeKind {
    /// Ball `L^{p1}` norms of the drift; defined for `R >= 1`.
    Drift,
    /// Ball `L^{p1}` norms of `grad sigma`; defined for `R >= 3`.
    Diffusion,
}

/// Logarithmic growth envelope `(log R + 1)^{(p1-d)^2 / (2 p1^2)}` for the
/// drift, `(log(R/3) + 1)^{same}` for the diffusion gradient.
pub fn growth_envelope<T: Real>(r: T, kind: EnvelopeKind, p1: T, dim: usize) -> Result<T> {
    let d = T::of(dim as f64);
    if !(p1 > d) {
        return Err(Error::Parameter(format!(
            "p1 must exceed d (got p1 = {p1}, d = {dim})"
        )));
    }
    let exponent = (p1 - d) * (p1 - d) / (T::of(2.0) * p1 * p1);
    let base = match kind {
        EnvelopeKind::Drift => {
            if !(r >= T::one()) {
                return Err(Error::Parameter(format!(
                    "drift envelope needs R >= 1, got {r}"
                )));
            }
            r.ln() + T::one()
        }
        EnvelopeKind::Diffusion => {
            if !(r >= T::of(3.0)) {
                return Err(Error::Parameter(format!(
                    "diffusion envelope needs R >= 3, got {r}"
                )));
            }
            (r / T::of(3.0)).ln() + T::one()
        }
    };
    Ok(base.powf(exponent))
}

/// A drift/diffusion pair given by pointwise evaluation closures.
///
/// `drift` fills `dim` values, `diffusion` fills `dim * noise_dim` values
/// (row-major `d x m`), and `grad_diffusion`, when present, fills
/// `dim * noise_dim * dim` values with component `(i * m + j) * d + k`
/// holding `d sigma_{ij} / d x_k`.
#[derive(Clone)]
pub struct CoefficientField<T> {
    dim: usize,
    noise_dim: usize,
    drift: FieldEval<T>,
    diffusion: FieldEval<T>,
    grad_diffusion: Option<FieldEval<T>>,
    support_radius: Option<T>,
    descriptor: String,
}

impl<T: Real> CoefficientField<T> {
    pub fn new(
        dim: usize,
        noise_dim: usize,
        drift: FieldEval<T>,
        diffusion: FieldEval<T>,
        grad_diffusion: Option<FieldEval<T>>,
        support_radius: Option<T>,
        descriptor: impl Into<String>,
    ) -> Result<Self> {
        if dim == 0 || dim > crate::grid::MAX_DIM {
            return Err(Error::Parameter(format!(
                "field dimension must be 1..=3, got {dim}"
            )));
        }
        if noise_dim == 0 {
            return Err(Error::Parameter("noise dimension must be positive".into()));
        }
        Ok(CoefficientField {
            dim,
            noise_dim,
            drift,
            diffusion,
            grad_diffusion,
            support_radius,
            descriptor: descriptor.into(),
        })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of driving noise components of the raw field.
    #[inline]
    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    /// Radius outside which the drift is identically zero, if known.
    #[inline]
    pub fn support_radius(&self) -> Option<T> {
        self.support_radius
    }

    /// Stable textual identity used for cache keys and manifests.
    #[inline]
    pub fn descriptor(&self) -> &str {
        &self.descriptor
    }

    #[inline]
    pub fn drift(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(out.len(), self.dim);
        (self.drift)(x, out);
    }

    #[inline]
    pub fn diffusion(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(out.len(), self.dim * self.noise_dim);
        (self.diffusion)(x, out);
    }

    pub fn has_grad_diffusion(&self) -> bool {
        self.grad_diffusion.is_some()
    }

    pub fn grad_diffusion(&self, x: &[T], out: &mut [T]) -> Result<()> {
        match &self.grad_diffusion {
            Some(g) => {
                debug_assert_eq!(out.len(), self.dim * self.noise_dim * self.dim);
                g(x, out);
                Ok(())
            }
            None => Err(Error::Parameter(format!(
                "field `{}` carries no diffusion gradient",
                self.descriptor
            ))),
        }
    }

    /// `a(x) = sigma sigma^T`, row-major `d x d`.
    pub fn a(&self, x: &[T], out: &mut [T]) {
        let d = self.dim;
        let m = self.noise_dim;
        let mut sigma = vec![T::zero(); d * m];
        self.diffusion(x, &mut sigma);
        for i in 0..d {
            for j in 0..d {
                let mut s = T::zero();
                for k in 0..m {
                    s += sigma[i * m + k] * sigma[j * m + k];
                }
                out[i * d + j] = s;
            }
        }
    }
}

impl<T> std::fmt::Debug for CoefficientField<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CoefficientField")
            .field("dim", &self.dim)
            .field("noise_dim", &self.noise_dim)
            .field("descriptor", &self.descriptor)
            .finish()
    }
}

/// Truncated field: sharp drift cutoff at `R`, diffusion blended to the
/// constant far field `delta^{-1/2} I` across `[R, 3R]`. The widened noise
/// has `m + d` components (`2d` for square diffusions).
#[derive(Clone, Debug)]
pub struct TruncatedField<T> {
    base: CoefficientField<T>,
    r: T,
    delta: T,
    sigma_bar: T,
}

impl<T: Real> TruncatedField<T> {
    #[inline]
    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    /// Noise dimension of the widened system: `m + d`.
    #[inline]
    pub fn noise_dim(&self) -> usize {
        self.base.noise_dim() + self.base.dim()
    }

    #[inline]
    pub fn r(&self) -> T {
        self.r
    }

    #[inline]
    pub fn delta(&self) -> T {
        self.delta
    }

    #[inline]
    pub fn base(&self) -> &CoefficientField<T> {
        &self.base
    }

    /// Cutoff pair `(rho_R, h_R)` at radius `|x|`.
    #[inline]
    pub fn cutoffs_at(&self, x_norm: T) -> (T, T) {
        (cutoff_rho(self.r, x_norm), cutoff_h(self.r, x_norm))
    }

    /// Truncated drift `b 1_{|x| <= R}`; fills `dim` values.
    #[inline]
    pub fn drift_r(&self, x: &[T], out: &mut [T]) {
        if norm2(x) <= self.r {
            self.base.drift(x, out);
        } else {
            for o in out.iter_mut() {
                *o = T::zero();
            }
        }
    }

    /// Widened diffusion `[rho_R sigma, h_R sigma_bar]`, row-major
    /// `d x (m + d)`; fills that many values.
    pub fn sigma_r(&self, x: &[T], out: &mut [T]) {
        let d = self.base.dim();
        let m = self.base.noise_dim();
        let w = m + d;
        debug_assert_eq!(out.len(), d * w);
        let xn = norm2(x);
        let (rho, h) = self.cutoffs_at(xn);
        let hbar = h * self.sigma_bar;
        if rho > T::zero() {
            let mut sigma = [T::zero(); crate::grid::MAX_DIM * crate::grid::MAX_DIM];
            let sigma = &mut sigma[..d * m];
            self.base.diffusion(x, sigma);
            for i in 0..d {
                for j in 0..m {
                    out[i * w + j] = rho * sigma[i * m + j];
                }
            }
        } else {
            for i in 0..d {
                for j in 0..m {
                    out[i * w + j] = T::zero();
                }
            }
        }
        for i in 0..d {
            for j in 0..d {
                out[i * w + m + j] = if i == j { hbar } else { T::zero() };
            }
        }
    }

    /// `a_R = rho^2 a + h^2 delta^{-1} I`, row-major `d x d`.
    pub fn a_r(&self, x: &[T], out: &mut [T]) {
        let d = self.base.dim();
        debug_assert_eq!(out.len(), d * d);
        let xn = norm2(x);
        let (rho, h) = self.cutoffs_at(xn);
        if rho > T::zero() {
            self.base.a(x, out);
            let rho2 = rho * rho;
            for v in out.iter_mut() {
                *v *= rho2;
            }
        } else {
            for v in out.iter_mut() {
                *v = T::zero();
            }
        }
        let iso = h * h / self.delta;
        for i in 0..d {
            out[i * d + i] += iso;
        }
    }

    /// Measured sup of `|sigma_R|` (operator-dominating Frobenius norm) over
    /// a deterministic radial sample; used for transformed-coefficient
    /// bounds in reports.
    pub fn sup_sigma_norm(&self) -> T {
        let d = self.dim();
        let w = self.noise_dim();
        let mut buf = vec![T::zero(); d * w];
        let mut x = vec![T::zero(); d];
        let mut sup = T::zero();
        for k in 0..=120 {
            let radius = self.r * T::of(3.2) * T::of(k as f64) / T::of(120.0);
            for axis in 0..d {
                for x_i in x.iter_mut() {
                    *x_i = T::zero();
                }
                x[axis] = radius;
                self.sigma_r(&x, &mut buf);
                sup = sup.max(norm2(&buf));
            }
        }
        sup
    }
}

/// Truncate a field at radius `r >= 1` and audit nondegeneracy:
/// `(delta/2) |xi|^2 <= <a_R xi, xi> <= 2 delta^{-1} |xi|^2` on a
/// deterministic sample of shells and directions.
pub fn truncate<T: Real>(
    field: &CoefficientField<T>,
    r: T,
    params: &AssumptionParams<T>,
) -> Result<TruncatedField<T>> {
    params.validate(field.dim())?;
    if !(r >= T::one()) || !r.is_finite() {
        return Err(Error::Parameter(format!(
            "truncation radius must satisfy R >= 1, got {r}"
        )));
    }
    let tf = TruncatedField {
        base: field.clone(),
        r,
        delta: params.delta,
        sigma_bar: T::one() / params.delta.sqrt(),
    };
    audit_ellipticity(&tf)?;
    Ok(tf)
}

/// Deterministic spot check of the two-sided ellipticity bound for `a_R`.
fn audit_ellipticity<T: Real>(tf: &TruncatedField<T>) -> Result<()> {
    let d = tf.dim();
    let lower = tf.delta / T::of(2.0);
    let upper = T::of(2.0) / tf.delta;
    let tol = T::of(1e-9);
    let mut a = vec![T::zero(); d * d];
    let mut x = vec![T::zero(); d];
    // Shells spanning every cutoff regime, directions along axes and the
    // main diagonal, a small deterministic set of test vectors.
    let shells: [f64; 12] = [
        0.0, 0.5, 0.99, 1.1, 1.45, 1.6, 1.99, 2.2, 2.45, 2.6, 2.99, 3.5,
    ];
    let mut xis: Vec<Vec<T>> = Vec::new();
    for axis in 0..d {
        let mut e = vec![T::zero(); d];
        e[axis] = T::one();
        xis.push(e);
    }
    xis.push(vec![T::one(); d]);
    let mut seed = 0x9e3779b97f4a7c15u64;
    for _ in 0..4 {
        let mut v = vec![T::zero(); d];
        for v_i in v.iter_mut() {
            seed = crate::sim::rng::splitmix64(seed);
            *v_i = T::of((seed >> 11) as f64 / (1u64 << 53) as f64 - 0.5);
        }
        if norm2(&v) > T::zero() {
            xis.push(v);
        }
    }
    for &shell in &shells {
        let radius = tf.r * T::of(shell);
        for dir in 0..d {
            for x_i in x.iter_mut() {
                *x_i = T::zero();
            }
            x[dir] = radius;
            tf.a_r(&x, &mut a);
            for xi in &xis {
                let n2 = crate::real::dot(xi, xi);
                let mut quad = T::zero();
                for i in 0..d {
                    for j in 0..d {
                        quad += a[i * d + j] * xi[i] * xi[j];
                    }
                }
                if quad < (lower - tol) * n2 || quad > (upper + tol) * n2 {
                    return Err(Error::Degenerate(format!(
                        "a_R fails two-sided ellipticity at x = {:?}: <a xi, xi> = {} for |xi|^2 = {} (bounds [{}, {}])",
                        x.iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>(),
                        quad,
                        n2,
                        lower * n2,
                        upper * n2
                    )));
                }
            }
        }
    }
    Ok(())
}

/// One audited radius.
#[derive(Debug, Clone)]
pub struct AuditRow<T> {
    pub r: T,
    /// Ball L^{p1} norm of the drift and its envelope budget.
    pub drift_norm: T,
    pub drift_budget: T,
    pub drift_pass: bool,
    pub drift_quadrature_converged: bool,
    /// Ball L^{p1} norm of grad sigma (when the field provides it; needs R >= 3).
    pub grad_sigma_norm: Option<T>,
    pub grad_sigma_budget: Option<T>,
    pub grad_sigma_pass: Option<bool>,
}

/// Audit table across truncation radii.
#[derive(Debug, Clone)]
pub struct AuditReport<T> {
    pub p1: T,
    pub rows: Vec<AuditRow<T>>,
}

impl<T: Real> AuditReport<T> {
    /// True when every audited norm sits inside its budget and every
    /// quadrature converged.
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|row| {
            row.drift_pass
                && row.drift_quadrature_converged
                && row.grad_sigma_pass.unwrap_or(true)
        })
    }
}

/// Verify the growth assumptions at each radius in `rs`: ball `L^{p1}` norms
/// of the drift (and of `grad sigma` when available and `R >= 3`) against
/// `beta * envelope(R) + beta_tilde`. Quadrature is adaptive midpoint,
/// refined until the relative change drops below 1e-3; a non-finite sample
/// inside the ball aborts with the offending point.
pub fn audit_assumptions<T: Real>(
    field: &CoefficientField<T>,
    params: &AssumptionParams<T>,
    rs: &[T],
) -> Result<AuditReport<T>> {
    params.validate(field.dim())?;
    let mut rows = Vec::with_capacity(rs.len());
    for &r in rs {
        if !(r >= T::one()) {
            return Err(Error::Parameter(format!(
                "audit radius must satisfy R >= 1, got {r}"
            )));
        }
        let d = field.dim();
        let (drift_norm, drift_converged) = ball_lp_norm(
            |x, out| field.drift(x, out),
            d,
            params.p1,
            r,
            d,
            "drift",
        )?;
        let drift_budget =
            params.beta * growth_envelope(r, EnvelopeKind::Drift, params.p1, d)? + params.beta_tilde;
        let slack = T::of(1e-12);
        let mut row = AuditRow {
            r,
            drift_norm,
            drift_budget,
            drift_pass: drift_norm <= drift_budget + slack,
            drift_quadrature_converged: drift_converged,
            grad_sigma_norm: None,
            grad_sigma_budget: None,
            grad_sigma_pass: None,
        };
        if field.has_grad_diffusion() && r >= T::of(3.0) {
            let arity = d * field.noise_dim() * d;
            let (gs_norm, _gs_conv) = ball_lp_norm(
                |x, out| {
                    field
                        .grad_diffusion(x, out)
                        .expect("checked has_grad_diffusion")
                },
                arity,
                params.p1,
                r,
                d,
                "grad sigma",
            )?;
            let budget = params.beta
                * growth_envelope(r, EnvelopeKind::Diffusion, params.p1, d)?
                + params.beta_tilde;
            row.grad_sigma_pass = Some(gs_norm <= budget + slack);
            row.grad_sigma_norm = Some(gs_norm);
            row.grad_sigma_budget = Some(budget);
        }
        rows.push(row);
    }
    Ok(AuditReport { p1: params.p1, rows })
}

/// Adaptive midpoint quadrature of `(integral_{B(r)} |f|^{p1})^{1/p1}`.
/// Returns the norm and a convergence flag (false when the refinement cap is
/// hit before the 1e-3 relative-change criterion, as happens for divergent
/// integrands).
fn ball_lp_norm<T: Real>(
    eval: impl Fn(&[T], &mut [T]),
    arity: usize,
    p1: T,
    r: T,
    dim: usize,
    what: &str,
) -> Result<(T, bool)> {
    let max_m: usize = match dim {
        1 => 1 << 18,
        2 => 1 << 10,
        _ => 1 << 7,
    };
    let mut m: usize = match dim {
        1 => 64,
        2 => 32,
        _ => 16,
    };
    let mut prev: Option<T> = None;
    let mut buf = vec![T::zero(); arity];
    let mut x = vec![T::zero(); dim];
    loop {
        let cell = T::of(2.0) * r / T::of(m as f64);
        let mut vol = T::one();
        for _ in 0..dim {
            vol *= cell;
        }
        let mut sum = T::zero();
        let total = m.pow(dim as u32);
        for cell_idx in 0..total {
            let mut rem = cell_idx;
            for x_a in x.iter_mut().take(dim) {
                let i = rem % m;
                rem /= m;
                *x_a = -r + cell * (T::of(i as f64) + T::of(0.5));
            }
            if norm2(&x) > r {
                continue;
            }
            eval(&x, &mut buf);
            let mag = norm2(&buf);
            if !mag.is_finite() {
                return Err(Error::AssumptionViolation {
                    what: format!("non-finite {what} value inside B(R)"),
                    point: x.iter().map(|v| v.to_f64_lossy()).collect(),
                });
            }
            sum += mag.powf(p1) * vol;
        }
        let norm = sum.powf(T::one() / p1);
        if let Some(p) = prev {
            let denom = norm.abs().max(T::of(1e-300));
            if ((norm - p) / denom).abs() < T::of(1e-3) {
                return Ok((norm, true));
            }
        }
        prev = Some(norm);
        if m >= max_m {
            return Ok((norm, false));
        }
        m *= 2;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(p1: f64) -> AssumptionParams<f64> {
        AssumptionParams {
            p1,
            beta: 0.0,
            beta_tilde: 2.0,
            delta: 0.5,
            varpi: 0.5,
        }
    }

    #[test]
    fn cutoff_values_at_knots() {
        // Frozen values: h at the midpoint of its ramp, rho at the midpoint
        // of its mirrored ramp, and the flats on either side.
        assert_eq!(cutoff_h(1.0, 1.5), 0.5);
        assert_eq!(cutoff_rho(1.0, 2.5), 0.5);
        assert_eq!(cutoff_h(1.0, 0.3), 0.0);
        assert_eq!(cutoff_h(1.0, 1.0), 0.0);
        assert_eq!(cutoff_h(1.0, 2.0), 1.0);
        assert_eq!(cutoff_h(1.0, 7.0), 1.0);
        assert_eq!(cutoff_rho(1.0, 0.0), 1.0);
        assert_eq!(cutoff_rho(1.0, 2.0), 1.0);
        assert_eq!(cutoff_rho(1.0, 3.0), 0.0);
        assert_eq!(cutoff_rho(1.0, 9.0), 0.0);
    }

    #[test]
    fn cutoffs_are_c1_at_the_seams() {
        // Values and one-sided difference quotients agree at each knot.
        let r = 1.7;
        let eps = 1e-7;
        for knot in [r, 1.5 * r, 2.0 * r, 2.5 * r, 3.0 * r] {
            for f in [cutoff_h::<f64>, cutoff_rho::<f64>] {
                let left = (f(r, knot) - f(r, knot - eps)) / eps;
                let right = (f(r, knot + eps) - f(r, knot)) / eps;
                assert!(
                    (left - right).abs() < 1e-5,
                    "kink at {knot}: {left} vs {right}"
                );
                assert!((f(r, knot + eps) - f(r, knot - eps)).abs() < 1e-5);
            }
        }
    }

    proptest! {
        // Holder seminorm budgets: 8 for h, 12 for rho, any exponent in (0,1].
        #[test]
        fn cutoff_h_holder_bound(
            r in 1.0f64..8.0,
            x in 0.0f64..30.0,
            y in 0.0f64..30.0,
            varpi in 0.05f64..1.0,
        ) {
            let lhs = (cutoff_h(r, x) - cutoff_h(r, y)).abs();
            prop_assert!(lhs <= 8.0 * (x - y).abs().powf(varpi) + 1e-12);
        }

        #[test]
        fn cutoff_rho_holder_bound(
            r in 1.0f64..8.0,
            x in 0.0f64..30.0,
            y in 0.0f64..30.0,
            varpi in 0.05f64..1.0,
        ) {
            let lhs = (cutoff_rho(r, x) - cutoff_rho(r, y)).abs();
            prop_assert!(lhs <= 12.0 * (x - y).abs().powf(varpi) + 1e-12);
        }

        #[test]
        fn cutoffs_stay_in_unit_interval(r in 1.0f64..10.0, x in 0.0f64..50.0) {
            for v in [cutoff_h(r, x), cutoff_rho(r, x)] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn envelope_frozen_value() {
        // R = e, drift, p1 = 2d: exponent (p1-d)^2/(2 p1^2) = 1/8, base = 2.
        for d in 1..=3usize {
            let v = growth_envelope(std::f64::consts::E, EnvelopeKind::Drift, 2.0 * d as f64, d)
                .unwrap();
            assert!((v - 2.0f64.powf(0.125)).abs() < 1e-14);
        }
    }

    #[test]
    fn envelope_domain_errors() {
        assert!(growth_envelope(0.5, EnvelopeKind::Drift, 4.0, 1).is_err());
        assert!(growth_envelope(2.0, EnvelopeKind::Diffusion, 4.0, 1).is_err());
        assert!(growth_envelope(3.0, EnvelopeKind::Diffusion, 4.0, 1).is_ok());
        assert!(growth_envelope(2.0, EnvelopeKind::Drift, 1.0, 1).is_err());
    }

    #[test]
    fn envelope_is_monotone_in_r() {
        let mut prev = 0.0;
        for k in 0..40 {
            let r = 1.0 + k as f64;
            let v = growth_envelope(r, EnvelopeKind::Drift, 4.0, 2).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn truncate_frozen_a_r_value() {
        // sigma = I, delta = 1/2, R = 1, |x| = 1.5: rho = 1, h = 1/2, so
        // a_R = 1 + (1/4) * 2 = 1.5 on the diagonal.
        let field = presets::zero::<f64>(2).unwrap();
        let tf = truncate(&field, 1.0, &params(4.0)).unwrap();
        let mut a = [0.0; 4];
        tf.a_r(&[1.5, 0.0], &mut a);
        assert!((a[0] - 1.5).abs() < 1e-14);
        assert!((a[3] - 1.5).abs() < 1e-14);
        assert_eq!(a[1], 0.0);
        // Far field: a = delta^{-1} I = 2 I.
        tf.a_r(&[4.0, 0.0], &mut a);
        assert!((a[0] - 2.0).abs() < 1e-14);
        // Inside the ball: original a = I.
        tf.a_r(&[0.3, 0.1], &mut a);
        assert!((a[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn truncated_drift_has_sharp_support() {
        let field = presets::ou::<f64>(1).unwrap();
        let tf = truncate(&field, 2.0, &params(2.5)).unwrap();
        let mut b = [0.0];
        tf.drift_r(&[1.5], &mut b);
        assert_eq!(b[0], -1.5);
        tf.drift_r(&[2.5], &mut b);
        assert_eq!(b[0], 0.0);
    }

    #[test]
    fn sigma_r_shape_and_far_field() {
        let field = presets::zero::<f64>(2).unwrap();
        let tf = truncate(&field, 1.0, &params(4.0)).unwrap();
        assert_eq!(tf.noise_dim(), 4);
        let mut s = [0.0; 8];
        // Far outside: left block zero, right block delta^{-1/2} I.
        tf.sigma_r(&[5.0, 0.0], &mut s);
        let sbar = 1.0 / 0.5f64.sqrt();
        assert_eq!(&s[0..2], &[0.0, 0.0]);
        assert!((s[2] - sbar).abs() < 1e-14);
        assert_eq!(s[3], 0.0);
        assert!((s[7] - sbar).abs() < 1e-14);
        // Inside: left block I, right block zero.
        tf.sigma_r(&[0.2, 0.0], &mut s);
        assert_eq!(s[0], 1.0);
        assert_eq!(&s[2..4], &[0.0, 0.0]);
    }

    proptest! {
        // Ellipticity of a_R for the identity-diffusion presets at any point.
        #[test]
        fn a_r_two_sided_ellipticity(
            x0 in -8.0f64..8.0,
            x1 in -8.0f64..8.0,
            xi0 in -2.0f64..2.0,
            xi1 in -2.0f64..2.0,
            r in 1.0f64..3.0,
        ) {
            prop_assume!(xi0.abs() + xi1.abs() > 1e-3);
            let field = presets::zero::<f64>(2).unwrap();
            let tf = truncate(&field, r, &params(4.0)).unwrap();
            let mut a = [0.0; 4];
            tf.a_r(&[x0, x1], &mut a);
            let n2 = xi0 * xi0 + xi1 * xi1;
            let quad = a[0] * xi0 * xi0 + (a[1] + a[2]) * xi0 * xi1 + a[3] * xi1 * xi1;
            let delta = 0.5;
            prop_assert!(quad >= delta / 2.0 * n2 - 1e-12);
            prop_assert!(quad <= 2.0 / delta * n2 + 1e-12);
        }
    }

    #[test]
    fn truncate_rejects_bad_radius_and_params() {
        let field = presets::zero::<f64>(1).unwrap();
        assert!(truncate(&field, 0.5, &params(2.0)).is_err());
        let mut bad = params(2.0);
        bad.delta = 1.0;
        assert!(truncate(&field, 2.0, &bad).is_err());
        // p1 = d is the canonical rejection.
        let err = truncate(&field, 2.0, &params(1.0)).unwrap_err();
        assert!(err.to_string().contains("p1 must exceed d"));
    }

    #[test]
    fn truncate_flags_degenerate_diffusion() {
        // sigma = 0 inside the ball: lower ellipticity bound fails there.
        let degenerate = CoefficientField::new(
            1,
            1,
            Arc::new(|_: &[f64], out: &mut [f64]| out[0] = 0.0),
            Arc::new(|_: &[f64], out: &mut [f64]| out[0] = 0.0),
            None,
            None,
            "flat sigma",
        )
        .unwrap();
        assert!(matches!(
            truncate(&degenerate, 1.0, &params(2.0)),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn audit_indicator_drift_frozen_norm() {
        // b = 1_{|x| <= 1} in d = 1, p1 = 2, R = 2: norm sqrt(2) <= budget 2.
        let field = CoefficientField::new(
            1,
            1,
            Arc::new(|x: &[f64], out: &mut [f64]| {
                out[0] = if x[0].abs() <= 1.0 { 1.0 } else { 0.0 }
            }),
            Arc::new(|_: &[f64], out: &mut [f64]| out[0] = 1.0),
            None,
            Some(1.0),
            "indicator drift",
        )
        .unwrap();
        let report = audit_assumptions(&field, &params(2.0), &[2.0]).unwrap();
        let row = &report.rows[0];
        assert!((row.drift_norm - 2.0f64.sqrt()).abs() < 2e-3);
        assert!(row.drift_pass);
        assert!(row.drift_quadrature_converged);
        assert!(report.all_pass());
    }

    #[test]
    fn audit_flags_divergent_integrand() {
        // |b|^{p1} = |x|^{-3/2} diverges in d = 1: quadrature cannot settle.
        let field = CoefficientField::new(
            1,
            1,
            Arc::new(|x: &[f64], out: &mut [f64]| {
                let a = x[0].abs();
                out[0] = if a > 0.0 && a <= 1.0 { a.powf(-0.5) } else { 0.0 }
            }),
            Arc::new(|_: &[f64], out: &mut [f64]| out[0] = 1.0),
            None,
            Some(1.0),
            "inverse sqrt drift",
        )
        .unwrap();
        let report = audit_assumptions(&field, &params(3.0), &[1.0]).unwrap();
        assert!(!report.rows[0].drift_quadrature_converged);
        assert!(!report.all_pass());
    }

    #[test]
    fn audit_reports_non_finite_point() {
        let field = CoefficientField::new(
            1,
            1,
            Arc::new(|x: &[f64], out: &mut [f64]| {
                out[0] = if x[0] > 0.4 && x[0] < 0.6 { f64::NAN } else { 0.0 }
            }),
            Arc::new(|_: &[f64], out: &mut [f64]| out[0] = 1.0),
            None,
            None,
            "nan pocket",
        )
        .unwrap();
        match audit_assumptions(&field, &params(2.0), &[1.0]) {
            Err(Error::AssumptionViolation { point, .. }) => {
                assert!(point[0] > 0.3 && point[0] < 0.7);
            }
            other => panic!("expected assumption violation, got {other:?}"),
        }
    }

    #[test]
    fn singular_power_audit_converges_for_integrable_exponent() {
        // |b|^{p1} = c^{p1} |x|^{-gamma p1}, gamma p1 = 0.6 < 1 = d.
        let field = presets::singular_power::<f64>(1, 0.5, 0.3, 1.0).unwrap();
        let report = audit_assumptions(&field, &params(2.0), &[1.0, 2.0]).unwrap();
        for row in &report.rows {
            assert!(row.drift_quadrature_converged);
            // Closed form: c * sqrt(2 / (1 - 0.6)) = 0.5 * sqrt(5).
            assert!((row.drift_norm - 0.5 * 5.0f64.sqrt()).abs() < 5e-3);
        }
    }
}
