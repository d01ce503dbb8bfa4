//! Matrix-free preconditioned BiCGSTAB.
//!
//! The caller provides the operator and the (right) preconditioner as
//! closures on flat slices; nothing is ever assembled. Convergence is
//! declared on the relative Euclidean residual against the right-hand side.

use crate::error::{Error, Result};
use crate::real::Real;

/// Iteration count and final relative residual of a successful solve.
#[derive(Debug, Clone, Copy)]
pub struct SolveStats<T> {
    pub iterations: usize,
    pub residual: T,
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn norm2<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Solve `A x = b` with preconditioner `M ~ A^{-1}` applied as `M(r) -> z`.
///
/// `x0` seeds the iteration (warm start); `tol` is relative to `||b||`.
/// Breakdowns and stagnation surface as [`Error::Solver`] carrying the last
/// relative residual.
pub fn bicgstab<T, A, M>(
    apply: A,
    precond: M,
    b: &[T],
    x0: Option<&[T]>,
    tol: T,
    max_iter: usize,
) -> Result<(Vec<T>, SolveStats<T>)>
where
    T: Real,
    A: Fn(&[T], &mut [T]),
    M: Fn(&[T], &mut [T]),
{
    let n = b.len();
    let b_norm = norm2(b);
    if b_norm == T::zero() {
        return Ok((
            vec![T::zero(); n],
            SolveStats {
                iterations: 0,
                residual: T::zero(),
            },
        ));
    }
    let mut x = match x0 {
        Some(x0) => x0.to_vec(),
        None => vec![T::zero(); n],
    };
    let mut r = vec![T::zero(); n];
    apply(&x, &mut r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = *bi - *ri;
    }
    let mut rel = norm2(&r) / b_norm;
    if rel <= tol {
        return Ok((
            x,
            SolveStats {
                iterations: 0,
                residual: rel,
            },
        ));
    }
    let r_hat = r.clone();
    let mut rho_prev = T::one();
    let mut alpha = T::one();
    let mut omega = T::one();
    let mut v = vec![T::zero(); n];
    let mut p = vec![T::zero(); n];
    let mut p_hat = vec![T::zero(); n];
    let mut s_hat = vec![T::zero(); n];
    let mut t = vec![T::zero(); n];
    let breakdown = T::of(1e-300);

    for it in 1..=max_iter {
        let rho = dot(&r_hat, &r);
        if rho.abs() < breakdown || !rho.is_finite() {
            return Err(Error::Solver {
                what: "BiCGSTAB breakdown: shadow-residual inner product vanished".into(),
                residual: rel.to_f64_lossy(),
                iterations: it,
            });
        }
        let beta = (rho / rho_prev) * (alpha / omega);
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        precond(&p, &mut p_hat);
        apply(&p_hat, &mut v);
        let denom = dot(&r_hat, &v);
        if denom.abs() < breakdown || !denom.is_finite() {
            return Err(Error::Solver {
                what: "BiCGSTAB breakdown: search direction lost orthogonality".into(),
                residual: rel.to_f64_lossy(),
                iterations: it,
            });
        }
        alpha = rho / denom;
        // s = r - alpha v (reuse r as s).
        for i in 0..n {
            r[i] -= alpha * v[i];
        }
        rel = norm2(&r) / b_norm;
        if rel <= tol {
            for i in 0..n {
                x[i] += alpha * p_hat[i];
            }
            return Ok((
                x,
                SolveStats {
                    iterations: it,
                    residual: rel,
                },
            ));
        }
        precond(&r, &mut s_hat);
        apply(&s_hat, &mut t);
        let tt = dot(&t, &t);
        if tt < breakdown || !tt.is_finite() {
            return Err(Error::Solver {
                what: "BiCGSTAB breakdown: stabilization step degenerated".into(),
                residual: rel.to_f64_lossy(),
                iterations: it,
            });
        }
        omega = dot(&t, &r) / tt;
        for i in 0..n {
            x[i] += alpha * p_hat[i] + omega * s_hat[i];
            r[i] -= omega * t[i];
        }
        rel = norm2(&r) / b_norm;
        if !rel.is_finite() {
            return Err(Error::Solver {
                what: "BiCGSTAB residual became non-finite".into(),
                residual: f64::NAN,
                iterations: it,
            });
        }
        if rel <= tol {
            return Ok((
                x,
                SolveStats {
                    iterations: it,
                    residual: rel,
                },
            ));
        }
        if omega.abs() < breakdown {
            return Err(Error::Solver {
                what: "BiCGSTAB breakdown: omega vanished".into(),
                residual: rel.to_f64_lossy(),
                iterations: it,
            });
        }
        rho_prev = rho;
    }
    Err(Error::Solver {
        what: format!("BiCGSTAB did not reach tolerance {tol} in {max_iter} iterations"),
        residual: rel.to_f64_lossy(),
        iterations: max_iter,
    })
}
