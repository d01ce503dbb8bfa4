//! The regularizing diffeomorphism `Phi(x) = x + u(x)` and the coefficient
//! transform it induces.
//!
//! `u` solves the drifted resolvent system `(L - lambda) u + b . grad u = -b`
//! componentwise on the truncated coefficients. Once the shift clears the
//! certified threshold ([`crate::pde::lambda_r_h`]) the solution obeys
//! `|u| <= 1/2` and `|grad u| <= 1/2`, making `Phi` bi-Lipschitz with
//! constants 1/2 and 2 and the transformed drift `b~ = lambda u o Phi^{-1}`
//! bounded — the original drift's singularity is absorbed by the map.
//!
//! Outside the sampled box (minus an interpolation rim) the map falls back
//! to the identity and counts the excursion; simulations are expected to
//! stop paths before they reach that rim, so a nonzero counter is a
//! diagnostic, not an error.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::coeffs::{AssumptionParams, TruncatedField};
use crate::error::{Error, Result};
use crate::grid::{io, Grid, GridFunction, Interp, MAX_DIM};
use crate::pde::{
    lambda_r_h, picard_solve_drifted, sample_coefficients, DriftedSolveOptions,
};
use crate::real::Real;

/// The regularizing map `Phi(x) = x + u(x)` with its gradient field.
#[derive(Debug)]
pub struct ZvonkinMap<T> {
    u: GridFunction<T>,
    /// Component `i * d + k` holds `d u_i / d x_k`.
    grad_u: GridFunction<T>,
    lambda: T,
    r: T,
    sup_u: T,
    sup_grad: T,
    interp: Interp,
    warnings: Vec<String>,
    out_of_box: AtomicU64,
}

/// Build knobs for [`build_map`].
#[derive(Debug, Clone)]
pub struct MapBuildOptions<T> {
    /// Resolvent shift; `None` selects the certified threshold.
    pub lambda: Option<T>,
    pub interp: Interp,
    pub picard: DriftedSolveOptions<T>,
}

impl<T: Real> Default for MapBuildOptions<T> {
    fn default() -> Self {
        MapBuildOptions {
            lambda: None,
            interp: Interp::Cubic,
            picard: DriftedSolveOptions::default(),
        }
    }
}

/// Solve the map system on `grid` for the truncated field.
///
/// `c2` is the calibrated resolvent constant entering the certified shift.
/// Sub-threshold shifts, boxes too small for the truncation collar, and
/// violated map bounds are recorded as warnings on the returned map.
pub fn build_map<T: Real>(
    grid: &Grid<T>,
    field: &TruncatedField<T>,
    params: &AssumptionParams<T>,
    c2: T,
    opts: &MapBuildOptions<T>,
) -> Result<ZvonkinMap<T>> {
    let threshold = lambda_r_h(params, grid.dim(), field.r(), c2)?;
    let lambda = opts.lambda.unwrap_or(threshold);
    if !(lambda > T::zero()) || !lambda.is_finite() {
        return Err(Error::Parameter(format!(
            "map shift must be positive and finite, got {lambda}"
        )));
    }
    let mut warnings = Vec::new();
    if lambda < threshold {
        warnings.push(format!(
            "shift {lambda} is below the certified threshold {threshold}; the contraction and bi-Lipschitz bounds are not guaranteed"
        ));
    }
    let three_r = T::of(3.0) * field.r();
    if grid.l_box() < three_r {
        warnings.push(format!(
            "box half-width {} does not contain the full truncation collar {three_r}; far-field coefficients are distorted by periodic wrap",
            grid.l_box()
        ));
    }
    let (a, b) = sample_coefficients(field, grid)?;
    let mut f = b.clone();
    for v in f.values_mut() {
        *v = -*v;
    }
    let res = picard_solve_drifted(grid, &a, &b, lambda, &f, &opts.picard)?;
    let half = T::of(0.5);
    if res.sup_u > half {
        warnings.push(format!(
            "sup |u| = {} exceeds 1/2; the map may fail to be invertible",
            res.sup_u
        ));
    }
    if res.sup_grad > half {
        warnings.push(format!(
            "sup |grad u| = {} exceeds 1/2; the bi-Lipschitz constants are not certified",
            res.sup_grad
        ));
    }
    let grad_u = res.u.fd_gradient();
    Ok(ZvonkinMap {
        u: res.u,
        grad_u,
        lambda,
        r: field.r(),
        sup_u: res.sup_u,
        sup_grad: res.sup_grad,
        interp: opts.interp,
        warnings,
        out_of_box: AtomicU64::new(0),
    })
}

impl<T: Real> ZvonkinMap<T> {
    pub fn grid(&self) -> &Grid<T> {
        self.u.grid()
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn r(&self) -> T {
        self.r
    }

    pub fn sup_u(&self) -> T {
        self.sup_u
    }

    pub fn sup_grad(&self) -> T {
        self.sup_grad
    }

    pub fn interp(&self) -> Interp {
        self.interp
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Displacement field `u` (arity `d`).
    pub fn displacement(&self) -> &GridFunction<T> {
        &self.u
    }

    /// Gradient field (arity `d*d`, row-major Jacobian of `u`).
    pub fn displacement_gradient(&self) -> &GridFunction<T> {
        &self.grad_u
    }

    /// Number of evaluations that fell outside the sampled box and used the
    /// identity extension.
    pub fn out_of_box_count(&self) -> u64 {
        self.out_of_box.load(Ordering::Relaxed)
    }

    /// Both map bounds hold, so the bi-Lipschitz constants 1/2 and 2 are
    /// certified.
    pub fn bi_lipschitz_certified(&self) -> bool {
        let half = T::of(0.5) + T::of(1e-12);
        self.sup_u <= half && self.sup_grad <= half
    }

    fn margin(&self) -> usize {
        match self.interp {
            Interp::Linear => 1,
            Interp::Cubic => 2,
        }
    }

    /// Displacement at an arbitrary point; identity (zero) outside the box
    /// rim, counted. Returns whether `x` was inside.
    pub fn displacement_at(&self, x: &[T], out: &mut [T]) -> bool {
        let inside = self.u.eval_zero_outside(x, self.interp, self.margin(), out);
        if !inside {
            self.out_of_box.fetch_add(1, Ordering::Relaxed);
        }
        inside
    }

    /// `Phi(x) = x + u(x)`; identity outside the rim. Returns whether `x`
    /// was inside the sampled box.
    pub fn forward(&self, x: &[T], out: &mut [T]) -> bool {
        let d = self.grid().dim();
        let mut disp = [T::zero(); MAX_DIM];
        let inside = self.displacement_at(x, &mut disp[..d]);
        for i in 0..d {
            out[i] = x[i] + disp[i];
        }
        inside
    }

    /// `Phi^{-1}(y)` by the contraction `x <- y - u(x)`, warm-started from
    /// `warm` when given (the previous time step's preimage), else from `y`.
    /// With `|grad u| <= 1/2` the iteration halves the error per sweep; it
    /// is capped at 60 sweeps.
    pub fn inverse(&self, y: &[T], warm: Option<&[T]>, out: &mut [T]) -> Result<()> {
        let d = self.grid().dim();
        let mut x = [T::zero(); MAX_DIM];
        x[..d].copy_from_slice(warm.unwrap_or(y));
        let mut disp = [T::zero(); MAX_DIM];
        let mut scale = T::one();
        for yi in &y[..d] {
            scale = scale.max(yi.abs());
        }
        let tol = T::epsilon() * T::of(64.0) * scale;
        let mut history = Vec::new();
        for _ in 0..60 {
            self.displacement_at(&x[..d], &mut disp[..d]);
            let mut step = T::zero();
            for i in 0..d {
                let next = y[i] - disp[i];
                step = step.max((next - x[i]).abs());
                x[i] = next;
            }
            if step <= tol {
                out[..d].copy_from_slice(&x[..d]);
                return Ok(());
            }
            history.push(step.to_f64_lossy());
        }
        Err(Error::NonConvergence {
            what: format!(
                "map inversion did not contract within 60 sweeps (|grad u| sup = {}); target point may be outside the bi-Lipschitz regime",
                self.sup_grad
            ),
            history,
        })
    }

    /// Jacobian `I + grad u` at `x` (row-major `d*d`); identity outside.
    pub fn jacobian(&self, x: &[T], out: &mut [T]) -> bool {
        let d = self.grid().dim();
        let inside = self
            .grad_u
            .eval_zero_outside(x, self.interp, self.margin(), out);
        if !inside {
            self.out_of_box.fetch_add(1, Ordering::Relaxed);
        }
        for i in 0..d {
            out[i * d + i] += T::one();
        }
        inside
    }

    /// Persist as two grid-function files plus a manifest.
    pub fn save(&self, dir: &Path, cache_key: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        io::write_binary(&self.u, self.interp, &dir.join("displacement.gf"))?;
        io::write_binary(&self.grad_u, self.interp, &dir.join("displacement_grad.gf"))?;
        let manifest = MapManifest {
            lambda: self.lambda.to_f64_lossy(),
            truncation_radius: self.r.to_f64_lossy(),
            sup_u: self.sup_u.to_f64_lossy(),
            sup_grad: self.sup_grad.to_f64_lossy(),
            interp: self.interp.name().to_string(),
            cache_key: cache_key.to_string(),
            warnings: self.warnings.clone(),
        };
        let text = toml::to_string_pretty(&manifest)
            .map_err(|e| Error::Format(format!("manifest serialization failed: {e}")))?;
        std::fs::write(dir.join("manifest.toml"), text)?;
        Ok(())
    }

    /// Load a map saved by [`ZvonkinMap::save`]. If `expect_key` is given,
    /// a mismatch with the stored cache key is a [`Error::Format`] error.
    pub fn load(dir: &Path, expect_key: Option<&str>) -> Result<ZvonkinMap<T>> {
        let text = std::fs::read_to_string(dir.join("manifest.toml"))?;
        let manifest: MapManifest = toml::from_str(&text)
            .map_err(|e| Error::Format(format!("bad map manifest: {e}")))?;
        if let Some(key) = expect_key {
            if key != manifest.cache_key {
                return Err(Error::Format(format!(
                    "map cache key mismatch: stored {}, expected {key}",
                    manifest.cache_key
                )));
            }
        }
        let (u, interp) = io::read_binary::<T>(&dir.join("displacement.gf"))?;
        let (grad_u, _) = io::read_binary::<T>(&dir.join("displacement_grad.gf"))?;
        let d = u.grid().dim();
        if u.arity() != d {
            return Err(Error::Format(format!(
                "displacement arity {} does not match dimension {d}",
                u.arity()
            )));
        }
        if grad_u.arity() != d * d || grad_u.grid() != u.grid() {
            return Err(Error::Format(
                "gradient file does not match the displacement grid".into(),
            ));
        }
        if manifest.interp != interp.name() {
            return Err(Error::Format(format!(
                "manifest interpolation `{}` disagrees with file header `{}`",
                manifest.interp,
                interp.name()
            )));
        }
        if !(manifest.lambda > 0.0) || !(manifest.truncation_radius > 0.0) {
            return Err(Error::Format(
                "manifest shift and truncation radius must be positive".into(),
            ));
        }
        Ok(ZvonkinMap {
            u,
            grad_u,
            lambda: T::of(manifest.lambda),
            r: T::of(manifest.truncation_radius),
            sup_u: T::of(manifest.sup_u),
            sup_grad: T::of(manifest.sup_grad),
            interp,
            warnings: manifest.warnings,
            out_of_box: AtomicU64::new(0),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MapManifest {
    lambda: f64,
    truncation_radius: f64,
    sup_u: f64,
    sup_grad: f64,
    interp: String,
    cache_key: String,
    #[serde(default)]
    warnings: Vec<String>,
}

/// Deterministic identity for a map build, used to cache solved maps on
/// disk: a digest over the field descriptor, grid, truncation, shift and
/// solver inputs that affect the solution.
pub fn map_cache_key<T: Real>(
    field: &TruncatedField<T>,
    grid: &Grid<T>,
    params: &AssumptionParams<T>,
    lambda: Option<T>,
    interp: Interp,
    picard_tol: T,
) -> String {
    use sha2::{Digest, Sha256};
    let canonical = format!(
        "field={};dim={};n={};half_width={:e};r={:e};delta={:e};p1={:e};beta={:e};beta_tilde={:e};varpi={:e};lambda={};interp={};tol={:e}",
        field.base().descriptor(),
        grid.dim(),
        grid.n(),
        grid.l_box().to_f64_lossy(),
        field.r().to_f64_lossy(),
        field.delta().to_f64_lossy(),
        params.p1.to_f64_lossy(),
        params.beta.to_f64_lossy(),
        params.beta_tilde.to_f64_lossy(),
        params.varpi.to_f64_lossy(),
        lambda
            .map(|l| format!("{:e}", l.to_f64_lossy()))
            .unwrap_or_else(|| "auto".into()),
        interp.name(),
        picard_tol.to_f64_lossy(),
    );
    let digest = Sha256::digest(canonical.as_bytes());
    let mut hex = String::with_capacity(64);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

/// Reusable buffers for allocation-free coefficient evaluation in
/// simulation loops.
#[derive(Debug, Clone)]
pub struct TransformScratch<T> {
    sigma: Vec<T>,
    jac: Vec<T>,
}

/// Coefficients of the transformed equation in `y = Phi(x)` space, with
/// fast paths for callers that maintain the `x`-state alongside.
///
/// Drift: `b~(y) = lambda u(Phi^{-1}(y))`, bounded by `lambda sup|u|`.
/// Diffusion: `sigma~(y) = (I + grad u) sigma_R (Phi^{-1}(y))`.
#[derive(Debug)]
pub struct TransformedField<T> {
    map: Arc<ZvonkinMap<T>>,
    field: TruncatedField<T>,
}

/// Pair a solved map with its truncated field.
pub fn transform_coefficients<T: Real>(
    map: Arc<ZvonkinMap<T>>,
    field: TruncatedField<T>,
) -> Result<TransformedField<T>> {
    if map.grid().dim() != field.dim() {
        return Err(Error::Parameter(format!(
            "map dimension {} does not match field dimension {}",
            map.grid().dim(),
            field.dim()
        )));
    }
    if (map.r() - field.r()).abs() > T::of(1e-12) * field.r() {
        return Err(Error::Parameter(format!(
            "map was built at truncation radius {}, field has {}",
            map.r(),
            field.r()
        )));
    }
    Ok(TransformedField { map, field })
}

impl<T: Real> TransformedField<T> {
    pub fn dim(&self) -> usize {
        self.field.dim()
    }

    /// Widened noise dimension `m + d`.
    pub fn noise_dim(&self) -> usize {
        self.field.noise_dim()
    }

    pub fn map(&self) -> &Arc<ZvonkinMap<T>> {
        &self.map
    }

    pub fn field(&self) -> &TruncatedField<T> {
        &self.field
    }

    pub fn scratch(&self) -> TransformScratch<T> {
        let d = self.dim();
        let w = self.noise_dim();
        TransformScratch {
            sigma: vec![T::zero(); d * w],
            jac: vec![T::zero(); d * d],
        }
    }

    /// Transformed drift through the maintained `x`-state:
    /// `b~(Phi(x)) = lambda u(x)`.
    pub fn drift_at_x(&self, x: &[T], out: &mut [T]) {
        self.map.displacement_at(x, out);
        for o in out.iter_mut() {
            *o *= self.map.lambda();
        }
    }

    /// Transformed diffusion through the maintained `x`-state:
    /// `sigma~(Phi(x)) = (I + grad u(x)) sigma_R(x)`, row-major
    /// `d x (m + d)`.
    pub fn diffusion_at_x(&self, x: &[T], scratch: &mut TransformScratch<T>, out: &mut [T]) {
        let d = self.dim();
        let w = self.noise_dim();
        debug_assert_eq!(out.len(), d * w);
        self.field.sigma_r(x, &mut scratch.sigma);
        self.map.jacobian(x, &mut scratch.jac);
        for i in 0..d {
            for j in 0..w {
                let mut s = T::zero();
                for k in 0..d {
                    s += scratch.jac[i * d + k] * scratch.sigma[k * w + j];
                }
                out[i * w + j] = s;
            }
        }
    }

    /// Drift in `y`-space: inverts the map first (`warm` seeds the
    /// inversion).
    pub fn drift_at_y(&self, y: &[T], warm: Option<&[T]>, out: &mut [T]) -> Result<()> {
        let d = self.dim();
        let mut x = [T::zero(); MAX_DIM];
        self.map.inverse(y, warm, &mut x[..d])?;
        self.drift_at_x(&x[..d], out);
        Ok(())
    }

    /// Diffusion in `y`-space: inverts the map first.
    pub fn diffusion_at_y(
        &self,
        y: &[T],
        warm: Option<&[T]>,
        scratch: &mut TransformScratch<T>,
        out: &mut [T],
    ) -> Result<()> {
        let d = self.dim();
        let mut x = [T::zero(); MAX_DIM];
        self.map.inverse(y, warm, &mut x[..d])?;
        self.diffusion_at_x(&x[..d], scratch, out);
        Ok(())
    }

    /// Supremum bound on the transformed drift: `lambda sup|u|`.
    pub fn drift_bound(&self) -> T {
        self.map.lambda() * self.map.sup_u()
    }

    /// Supremum bound on the transformed diffusion (Frobenius):
    /// `(1 + sup|grad u|) sup|sigma_R|`.
    pub fn diffusion_bound(&self) -> T {
        (T::one() + self.map.sup_grad()) * self.field.sup_sigma_norm()
    }
}
