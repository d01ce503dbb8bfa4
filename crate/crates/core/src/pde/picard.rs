//! Fixed-point solver for the drifted resolvent equation
//! `(L - lambda) u + b . grad u = f`, iterating
//! `u_{n+1} = (L - lambda)^{-1} (f - b . grad u_n)`.
//!
//! Convergence is declared on the discrete `W^{1,infinity}` norm of the
//! increment; the iteration contracts once the shift clears the floor
//! measured by [`super::lambda_r`]. Divergence is detected (growing
//! increments) and surfaced with the full increment history rather than
//! silently returning garbage.

use super::{solve_resolvent_warm, SolverOptions};
use crate::analysis::w1inf_norm;
use crate::error::{Error, Result};
use crate::grid::{Grid, GridFunction};
use crate::real::Real;

/// Knobs for the drifted fixed-point iteration.
#[derive(Debug, Clone, Copy)]
pub struct DriftedSolveOptions<T> {
    /// Increment tolerance in the discrete `W^{1,infinity}` norm.
    pub tol: T,
    /// Cap on fixed-point sweeps.
    pub max_iter: usize,
    /// Inner resolvent solver settings.
    pub solver: SolverOptions<T>,
}

impl<T: Real> Default for DriftedSolveOptions<T> {
    fn default() -> Self {
        DriftedSolveOptions {
            tol: T::of(1e-8),
            max_iter: 60,
            solver: SolverOptions::default(),
        }
    }
}

/// Output of [`picard_solve_drifted`].
#[derive(Debug, Clone)]
pub struct DriftedSolveResult<T> {
    pub u: GridFunction<T>,
    /// Resolvent solves performed.
    pub iterations: usize,
    /// Increment norms per sweep, until convergence.
    pub residual_history: Vec<T>,
    /// Pointwise supremum of `|u|` (Euclidean over components).
    pub sup_u: T,
    /// Pointwise supremum of `|grad u|` (Frobenius over all entries, a
    /// conservative stand-in for the operator norm).
    pub sup_grad: T,
}

/// Solve `(L - lambda) u + b . grad u = f` componentwise in `f`.
///
/// `b` has arity `d`; gradients are centered differences, and each sweep
/// warm-starts the inner solver from the previous iterate.
pub fn picard_solve_drifted<T: Real>(
    grid: &Grid<T>,
    a: &GridFunction<T>,
    b: &GridFunction<T>,
    lambda: T,
    f: &GridFunction<T>,
    opts: &DriftedSolveOptions<T>,
) -> Result<DriftedSolveResult<T>> {
    let d = grid.dim();
    if b.arity() != d || b.grid() != grid {
        return Err(Error::Parameter(format!(
            "drift must have arity {d} on the solver grid, got arity {}",
            b.arity()
        )));
    }
    if f.grid() != grid {
        return Err(Error::Parameter(
            "right-hand side is sampled on a different grid".into(),
        ));
    }
    if opts.max_iter == 0 {
        return Err(Error::Parameter("fixed-point cap must be positive".into()));
    }
    let arity = f.arity();
    let npts = grid.npts();
    let mut u = GridFunction::zeros(*grid, arity)?;
    let mut history: Vec<T> = Vec::new();
    for sweep in 1..=opts.max_iter {
        // rhs_c = f_c - b . grad u_c with the current iterate.
        let grad = u.fd_gradient();
        let mut rhs = GridFunction::zeros(*grid, arity)?;
        for c in 0..arity {
            let dst = rhs.component_mut(c);
            dst.copy_from_slice(f.component(c));
            for axis in 0..d {
                let der = grad.component(c * d + axis);
                let bax = b.component(axis);
                for i in 0..npts {
                    dst[i] -= bax[i] * der[i];
                }
            }
        }
        let (next, _) = solve_resolvent_warm(grid, a, lambda, &rhs, Some(&u), &opts.solver)?;
        let mut incr = next.clone();
        incr.axpy(T::one(), &u, -T::one());
        let delta = w1inf_norm(&incr);
        history.push(delta);
        u = next;
        if !delta.is_finite()
            || (sweep >= 3 && delta > T::of(10.0) * history[0] && delta > opts.tol)
        {
            return Err(Error::NonConvergence {
                what: format!(
                    "drifted fixed-point iteration diverged at sweep {sweep} (shift {lambda} is below the contraction floor for this drift)"
                ),
                history: history.iter().map(|h| h.to_f64_lossy()).collect(),
            });
        }
        if delta <= opts.tol {
            let grad = u.fd_gradient();
            return Ok(DriftedSolveResult {
                sup_u: u.max_pointwise_norm(),
                sup_grad: grad.max_pointwise_norm(),
                iterations: sweep,
                residual_history: history,
                u,
            });
        }
    }
    Err(Error::NonConvergence {
        what: format!(
            "drifted fixed-point iteration did not reach tolerance {} within {} sweeps",
            opts.tol, opts.max_iter
        ),
        history: history.iter().map(|h| h.to_f64_lossy()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde::solve_resolvent;
    use crate::spectral;

    fn unit_diffusion(grid: &Grid<f64>) -> GridFunction<f64> {
        let d = grid.dim();
        GridFunction::from_fn(*grid, d * d, |_x: &[f64], out: &mut [f64]| {
            out.fill(0.0);
            for i in 0..d {
                out[i * d + i] = 1.0;
            }
        })
        .unwrap()
    }

    fn cosine_drift(grid: &Grid<f64>, amp: f64) -> GridFunction<f64> {
        let k = spectral::wavenumber(1usize, grid.n(), grid.l_box());
        GridFunction::from_fn(*grid, grid.dim(), |x: &[f64], out: &mut [f64]| {
            for o in out.iter_mut() {
                *o = amp * (k * x[0]).cos();
            }
        })
        .unwrap()
    }

    #[test]
    fn drifted_mms_recovers_manufactured_solution() {
        let grid = Grid::<f64>::new(1, 512, 6.0).unwrap();
        let a = unit_diffusion(&grid);
        let b = cosine_drift(&grid, 0.5);
        let lambda = 2.0;
        let k = spectral::wavenumber(1usize, 512, 6.0);
        let u_star = |x: f64| (-x * x / 2.0).exp();
        let f = GridFunction::from_fn(grid, 1, |x: &[f64], out: &mut [f64]| {
            let u = u_star(x[0]);
            let up = -x[0] * u;
            let upp = (x[0] * x[0] - 1.0) * u;
            out[0] = 0.5 * upp + 0.5 * (k * x[0]).cos() * up - lambda * u;
        })
        .unwrap();
        let res =
            picard_solve_drifted(&grid, &a, &b, lambda, &f, &DriftedSolveOptions::default())
                .unwrap();
        let mut worst = 0.0f64;
        for idx in 0..grid.npts() {
            let mut x = [0.0];
            grid.point_of(idx, &mut x);
            worst = worst.max((res.u.at(0, idx) - u_star(x[0])).abs());
        }
        assert!(worst < 1e-3, "sup error {worst}");
        assert!(res.sup_u > 0.0 && res.sup_grad > 0.0);
        assert!(!res.residual_history.is_empty());
    }

    #[test]
    fn zero_drift_reduces_to_plain_resolvent() {
        let grid = Grid::<f64>::new(1, 128, 4.0).unwrap();
        let a = unit_diffusion(&grid);
        let b = GridFunction::zeros(grid, 1).unwrap();
        let f = GridFunction::from_fn(grid, 1, |x: &[f64], out: &mut [f64]| {
            out[0] = (-x[0] * x[0]).exp();
        })
        .unwrap();
        let res =
            picard_solve_drifted(&grid, &a, &b, 1.0, &f, &DriftedSolveOptions::default()).unwrap();
        let (direct, _) = solve_resolvent(&grid, &a, 1.0, &f, &SolverOptions::default()).unwrap();
        let mut diff = res.u.clone();
        diff.axpy(1.0, &direct, -1.0);
        assert!(diff.max_abs() < 1e-9);
        // First sweep lands on the answer; the second only certifies it.
        assert_eq!(res.iterations, 2);
    }

    #[test]
    fn iteration_count_nonincreasing_in_shift() {
        let grid = Grid::<f64>::new(1, 256, 6.0).unwrap();
        let a = unit_diffusion(&grid);
        let b = cosine_drift(&grid, 1.0);
        let f = GridFunction::from_fn(grid, 1, |x: &[f64], out: &mut [f64]| {
            out[0] = (-x[0] * x[0] / 2.0).exp();
        })
        .unwrap();
        let opts = DriftedSolveOptions {
            tol: 1e-6,
            max_iter: 200,
            ..DriftedSolveOptions::default()
        };
        let mut prev = usize::MAX;
        for lambda in [4.0, 16.0, 64.0] {
            let res = picard_solve_drifted(&grid, &a, &b, lambda, &f, &opts).unwrap();
            assert!(
                res.iterations <= prev,
                "iterations grew at lambda = {lambda}: {} > {prev}",
                res.iterations
            );
            prev = res.iterations;
        }
    }

    #[test]
    fn strong_drift_below_floor_diverges_with_history() {
        let grid = Grid::<f64>::new(1, 128, 4.0).unwrap();
        let a = unit_diffusion(&grid);
        let b = cosine_drift(&grid, 120.0);
        let f = GridFunction::from_fn(grid, 1, |x: &[f64], out: &mut [f64]| {
            out[0] = (-x[0] * x[0]).exp();
        })
        .unwrap();
        let err = picard_solve_drifted(&grid, &a, &b, 0.5, &f, &DriftedSolveOptions::default())
            .unwrap_err();
        match err {
            Error::NonConvergence { history, .. } => {
                assert!(history.len() >= 3, "history too short: {history:?}");
            }
            other => panic!("expected NonConvergence, got {other:?}"),
        }
    }
}
