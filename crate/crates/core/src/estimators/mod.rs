//! Monte Carlo verification of the quantitative estimates.
//!
//! Each check turns a path batch into a [`BoundReport`]: an empirical mean
//! with its standard error next to the analytic right-hand side, passing
//! exactly when `mean <= bound + 3 * stderr`. Exponential functionals are
//! aggregated in the log domain throughout, so a finite per-path integral
//! never produces a non-finite verdict. Conditional expectations are
//! approximated by unconditional restarts from recorded states (the scheme
//! is Markov); audit constants that the estimates leave unnamed are
//! calibrated on the additive preset and recorded in every report.
//!
//! All reductions run in fixed path order, so reports are deterministic
//! given the batch (and the batch is deterministic given seed and config).

use std::io::{BufWriter, Write as IoWrite};
use std::path::Path;

use rayon::prelude::*;

use crate::analysis::{lp_norm, Lp};
use crate::error::{Error, Result};
use crate::grid::{GridFunction, Interp, MAX_DIM};
use crate::pde::KrylovConstants;
use crate::real::{norm2, Real};
use crate::sim::{
    draw_increment, rng::path_rng, simulate_transformed, two_point, FlowBatch, PathBatch,
    Recording, SimConfig, TwoPointBatch,
};
use crate::zvonkin::TransformedField;

/// Sample mean with its uncertainty and accounting of exclusions.
#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloEstimate<T> {
    pub mean: T,
    pub stderr: T,
    /// Samples actually aggregated (invalid paths and clipped pairs are
    /// excluded).
    pub n_effective: usize,
    /// Samples excluded by an epsilon floor; surfaced so silent bias is
    /// impossible.
    pub clipped_count: usize,
    /// For exponential functionals: `ln(mean)` computed without leaving the
    /// log domain, reliable even when `mean` overflows.
    pub log_mean: Option<T>,
    /// Companion `ln(stderr)`.
    pub log_stderr: Option<T>,
}

impl<T: Real> MonteCarloEstimate<T> {
    /// Plain aggregation of finite samples.
    pub fn from_samples(samples: &[T], clipped_count: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Degenerate(
                "no samples survived exclusion; nothing to estimate".into(),
            ));
        }
        let n = T::of(samples.len() as f64);
        let mean = samples.iter().copied().sum::<T>() / n;
        let stderr = if samples.len() > 1 {
            let var = samples
                .iter()
                .map(|&s| (s - mean) * (s - mean))
                .sum::<T>()
                / (n - T::one());
            (var / n).sqrt()
        } else {
            T::zero()
        };
        Ok(MonteCarloEstimate {
            mean,
            stderr,
            n_effective: samples.len(),
            clipped_count,
            log_mean: None,
            log_stderr: None,
        })
    }

    /// Aggregate `exp(l_i)` given the exponents `l_i`, entirely in the log
    /// domain (log-sum-exp): the estimate of `E[exp(L)]` stays usable even
    /// when single samples overflow `exp`.
    pub fn from_log_samples(log_samples: &[T], clipped_count: usize) -> Result<Self> {
        if log_samples.is_empty() {
            return Err(Error::Degenerate(
                "no samples survived exclusion; nothing to estimate".into(),
            ));
        }
        let n = T::of(log_samples.len() as f64);
        let m = log_samples
            .iter()
            .copied()
            .fold(T::of(f64::NEG_INFINITY), |a, b| a.max(b));
        if !m.is_finite() {
            return Err(Error::Parameter(
                "log-domain samples must be finite".into(),
            ));
        }
        let mut sum_w = T::zero();
        for &l in log_samples {
            sum_w += (l - m).exp();
        }
        let w_mean = sum_w / n;
        let log_mean = m + w_mean.ln();
        let log_stderr = if log_samples.len() > 1 {
            let mut var_w = T::zero();
            for &l in log_samples {
                let w = (l - m).exp() - w_mean;
                var_w += w * w;
            }
            var_w = var_w / (n - T::one());
            m + (var_w / n).sqrt().ln()
        } else {
            T::of(f64::NEG_INFINITY)
        };
        Ok(MonteCarloEstimate {
            mean: log_mean.exp(),
            stderr: log_stderr.exp(),
            n_effective: log_samples.len(),
            clipped_count,
            log_mean: Some(log_mean),
            log_stderr: Some(log_stderr),
        })
    }

    /// Share of the total sum carried by the largest `fraction` of samples;
    /// the heavy-tail diagnostic for exponential functionals.
    fn top_share(log_samples: &[T], fraction: f64) -> T {
        let mut sorted = log_samples.to_vec();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        let k = ((sorted.len() as f64 * fraction).ceil() as usize).max(1);
        let m = sorted[0];
        let top: T = sorted[..k].iter().map(|&l| (l - m).exp()).sum();
        let total: T = sorted.iter().map(|&l| (l - m).exp()).sum();
        top / total
    }
}

/// Empirical estimate against an analytic right-hand side.
#[derive(Debug, Clone)]
pub struct BoundReport<T> {
    pub name: String,
    pub empirical: MonteCarloEstimate<T>,
    pub analytic_bound: T,
    /// `ln(analytic_bound)` when the bound itself can overflow.
    pub log_bound: Option<T>,
    /// `(bound - mean) / stderr`: how many standard errors of headroom
    /// remain (negative when the mean exceeds the bound).
    pub margin: T,
    /// Exactly `mean <= bound + 3 * stderr` (evaluated in the log domain
    /// when the estimate carries log fields).
    pub pass: bool,
    /// Resolvent constants the bound was computed from, when applicable.
    pub constants_used: Option<KrylovConstants<T>>,
    /// Calibrated audit constant used in the bound, when applicable.
    pub audit_constant: Option<T>,
    pub notes: Vec<String>,
}

/// `ln(exp(a) + exp(b))` without overflow.
fn log_add_exp<T: Real>(a: T, b: T) -> T {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if !hi.is_finite() {
        return hi;
    }
    hi + (T::one() + (lo - hi).exp()).ln()
}

/// Assemble a report, centralizing the pass rule.
pub fn make_report<T: Real>(
    name: impl Into<String>,
    empirical: MonteCarloEstimate<T>,
    analytic_bound: T,
    log_bound: Option<T>,
    constants_used: Option<KrylovConstants<T>>,
    audit_constant: Option<T>,
    notes: Vec<String>,
) -> BoundReport<T> {
    let three = T::of(3.0);
    let (pass, margin) = match (empirical.log_mean, empirical.log_stderr, log_bound) {
        (Some(lm), Some(ls), Some(lb)) => {
            // mean <= bound + 3*stderr  <=>  lm <= ln(e^lb + 3 e^ls)
            let rhs = log_add_exp(lb, ls + three.ln());
            let pass = lm <= rhs;
            // Margin in stderr units, computed as differences of exponents
            // so it stays finite whenever it is representable.
            let margin = if ls.is_finite() {
                (lb - ls).exp() - (lm - ls).exp()
            } else if lm <= lb {
                T::of(f64::INFINITY)
            } else {
                T::of(f64::NEG_INFINITY)
            };
            (pass, margin)
        }
        _ => {
            let pass = empirical.mean <= analytic_bound + three * empirical.stderr;
            let margin = if empirical.stderr > T::zero() {
                (analytic_bound - empirical.mean) / empirical.stderr
            } else if empirical.mean <= analytic_bound {
                T::of(f64::INFINITY)
            } else {
                T::of(f64::NEG_INFINITY)
            };
            (pass, margin)
        }
    };
    BoundReport {
        name: name.into(),
        empirical,
        analytic_bound,
        log_bound,
        margin,
        pass,
        constants_used,
        audit_constant,
        notes,
    }
}

fn require_scalar<T: Real>(f: &GridFunction<T>) -> Result<()> {
    if f.arity() != 1 {
        return Err(Error::Parameter(format!(
            "test function must be scalar, got arity {}",
            f.arity()
        )));
    }
    Ok(())
}

fn require_dense<T: Real>(batch: &PathBatch<T>) -> Result<()> {
    if batch.n_times() < 2 {
        return Err(Error::Parameter(
            "batch must be recorded densely (stride 1) for time integrals".into(),
        ));
    }
    Ok(())
}

fn check_occupation_exponent<T: Real>(dim: usize, p: T) -> Result<T> {
    let d = T::of(dim as f64);
    let floor = (d / T::of(2.0)).max(T::one());
    if !(p > floor) {
        return Err(Error::Parameter(format!(
            "integrability order must exceed max(d/2, 1) = {floor}, got {p}"
        )));
    }
    Ok(d / (T::of(2.0) * p))
}

/// Trapezoid of `f` along the recorded trajectory of one path over the
/// recorded nodes in `[t0, t1]`.
fn trapezoid_along<T: Real>(
    batch: &PathBatch<T>,
    f: &GridFunction<T>,
    path: usize,
    k0: usize,
    k1: usize,
    absolute: bool,
) -> T {
    let mut fx = [T::zero(); 1];
    let mut acc = T::zero();
    let mut prev = {
        f.eval_zero_outside(batch.state(path, k0), Interp::Linear, 1, &mut fx);
        if absolute {
            fx[0].abs()
        } else {
            fx[0]
        }
    };
    for k in k0..k1 {
        f.eval_zero_outside(batch.state(path, k + 1), Interp::Linear, 1, &mut fx);
        let cur = if absolute { fx[0].abs() } else { fx[0] };
        let dt = batch.times[k + 1] - batch.times[k];
        acc += (prev + cur) * dt / T::of(2.0);
        prev = cur;
    }
    acc
}

/// Recorded indices spanning `[t0, t1]` (endpoints snapped to the
/// recording grid).
fn snap_window<T: Real>(batch: &PathBatch<T>, t0: T, t1: T) -> Result<(usize, usize)> {
    let eps = T::of(1e-12) * (T::one() + t1.abs());
    if !(t0 >= -eps) || !(t1 > t0) || t1 > *batch.times.last().unwrap() + eps {
        return Err(Error::Parameter(format!(
            "time window [{t0}, {t1}] must satisfy 0 <= t0 < t1 <= horizon"
        )));
    }
    let k0 = batch
        .times
        .iter()
        .position(|&t| t >= t0 - eps)
        .ok_or_else(|| Error::Parameter("window start beyond recorded times".into()))?;
    let k1 = batch
        .times
        .iter()
        .rposition(|&t| t <= t1 + eps)
        .ok_or_else(|| Error::Parameter("window end before recorded times".into()))?;
    if k1 <= k0 {
        return Err(Error::Parameter(
            "time window contains fewer than two recorded instants".into(),
        ));
    }
    Ok((k0, k1))
}

/// Occupation-functional bound: the expected time integral of a
/// nonnegative test function along paths over `[t0, t1]` is controlled by
/// the resolvent constant, the shift floor, the window width and the
/// function's integral norm.
///
/// Empirical side: the trapezoid of `f(X_s)` over the recorded nodes,
/// averaged over valid paths. Bound: `4 c2 (k^e + k^(e-1)) (t1-t0)^(1-e)
/// |f|_p` with `k = T * lambda` and `e = d/(2p)`.
pub fn krylov_check<T: Real>(
    batch: &PathBatch<T>,
    f: &GridFunction<T>,
    t0: T,
    t1: T,
    p: T,
    lambda_r: T,
    constants: &KrylovConstants<T>,
) -> Result<BoundReport<T>> {
    require_scalar(f)?;
    require_dense(batch)?;
    let e = check_occupation_exponent(batch.dim, p)?;
    let (k0, k1) = snap_window(batch, t0, t1)?;
    let samples: Vec<T> = (0..batch.n_paths())
        .filter(|&pth| batch.valid[pth])
        .map(|pth| trapezoid_along(batch, f, pth, k0, k1, false))
        .collect();
    let est = MonteCarloEstimate::from_samples(&samples, 0)?;
    let horizon = *batch.times.last().unwrap();
    let kappa = horizon * lambda_r;
    let f_norm = lp_norm(f, Lp::P(p))?;
    let width = batch.times[k1] - batch.times[k0];
    let bound = T::of(4.0)
        * constants.c2
        * (kappa.powf(e) + kappa.powf(e - T::one()))
        * width.powf(T::one() - e)
        * f_norm;
    let mut notes = Vec::new();
    if samples.len() < batch.n_paths() {
        notes.push(format!(
            "{} invalid paths excluded",
            batch.n_paths() - samples.len()
        ));
    }
    Ok(make_report(
        "occupation-time integral",
        est,
        bound,
        None,
        Some(constants.clone()),
        None,
        notes,
    ))
}

/// Analytic exponential-occupation bound together with the partition data
/// used in its derivation.
#[derive(Debug, Clone)]
pub struct ExpBound<T> {
    pub bound: T,
    /// `ln(bound)`, always finite for finite inputs.
    pub log_bound: T,
    /// Width of the time partition behind the bound; infinite when the
    /// test-function norm vanishes.
    pub width: T,
    /// Number of partition cells, `ceil(T / width)` (0 when width is
    /// infinite).
    pub partitions: usize,
}

/// Exponential-occupation bound: `e * exp(T * core^(1/(1-e)))` with
/// `core = 4 a c2 (k^e + k^(e-1)) |f|_p / (1 - 1/e)`, plus the partition
/// width `core^(-1/(1-e))` it derives from. A vanishing norm gives the
/// short-case bound `e` exactly.
pub fn khasminskii_bound<T: Real>(
    a: T,
    f_norm_p: T,
    horizon: T,
    lambda_r: T,
    dim: usize,
    p: T,
    constants: &KrylovConstants<T>,
) -> Result<ExpBound<T>> {
    if !(a > T::zero()) {
        return Err(Error::Parameter(format!(
            "exponential rate must be positive, got {a}"
        )));
    }
    if f_norm_p < T::zero() {
        return Err(Error::Parameter("norm cannot be negative".into()));
    }
    let e = check_occupation_exponent(dim, p)?;
    if f_norm_p == T::zero() {
        return Ok(ExpBound {
            bound: T::one().exp(),
            log_bound: T::one(),
            width: T::of(f64::INFINITY),
            partitions: 0,
        });
    }
    let kappa = horizon * lambda_r;
    let one_minus_inv_e = T::one() - (-T::one()).exp();
    let core = T::of(4.0) * a * constants.c2 * (kappa.powf(e) + kappa.powf(e - T::one()))
        * f_norm_p
        / one_minus_inv_e;
    let expo = T::one() / (T::one() - e);
    let log_bound = T::one() + horizon * core.powf(expo);
    let width = core.powf(-expo);
    let partitions = (horizon / width).ceil().to_f64_lossy() as usize;
    Ok(ExpBound {
        bound: log_bound.exp(),
        log_bound,
        width,
        partitions,
    })
}

/// Exponential-occupation check: `E[exp(a * int_0^T |f(X_s)| ds)]`
/// aggregated by log-sum-exp against [`khasminskii_bound`]. Flags a heavy
/// tail when the top 1% of samples carries more than half the mean.
pub fn khasminskii_check<T: Real>(
    batch: &PathBatch<T>,
    f: &GridFunction<T>,
    a: T,
    p: T,
    lambda_r: T,
    constants: &KrylovConstants<T>,
) -> Result<BoundReport<T>> {
    require_scalar(f)?;
    require_dense(batch)?;
    let horizon = *batch.times.last().unwrap();
    let k1 = batch.n_times() - 1;
    let log_samples: Vec<T> = (0..batch.n_paths())
        .filter(|&pth| batch.valid[pth])
        .map(|pth| a * trapezoid_along(batch, f, pth, 0, k1, true))
        .collect();
    let est = MonteCarloEstimate::from_log_samples(&log_samples, 0)?;
    let f_norm = lp_norm(f, Lp::P(p))?;
    let analytic = khasminskii_bound(a, f_norm, horizon, lambda_r, batch.dim, p, constants)?;
    let mut notes = Vec::new();
    let share = MonteCarloEstimate::top_share(&log_samples, 0.01);
    if share > T::of(0.5) {
        notes.push(format!(
            "heavy tail: top 1% of samples carries {:.1}% of the mean",
            share.to_f64_lossy() * 100.0
        ));
    }
    if log_samples.len() < batch.n_paths() {
        notes.push(format!(
            "{} invalid paths excluded",
            batch.n_paths() - log_samples.len()
        ));
    }
    notes.push(format!(
        "partition width {} ({} cells)",
        analytic.width, analytic.partitions
    ));
    Ok(make_report(
        "exponential occupation functional",
        est,
        analytic.bound,
        Some(analytic.log_bound),
        Some(constants.clone()),
        None,
        notes,
    ))
}

/// Running-supremum moment check: `E[sup_s |X_s|^p]` against
/// `c_tilde (1 + |x0|^p + lambda^p)`. The supremum is the online maximum
/// over every accepted step, not just the recorded ones.
pub fn sup_moment_check<T: Real>(
    batch: &PathBatch<T>,
    x0: &[T],
    p: T,
    lambda_r: T,
    c_tilde: T,
) -> Result<BoundReport<T>> {
    if !(p >= T::of(2.0)) {
        return Err(Error::Parameter(format!(
            "moment order must be at least 2, got {p}"
        )));
    }
    let samples: Vec<T> = (0..batch.n_paths())
        .filter(|&pth| batch.valid[pth])
        .map(|pth| batch.max_norm[pth].powf(p))
        .collect();
    let est = MonteCarloEstimate::from_samples(&samples, 0)?;
    let bound = c_tilde * (T::one() + norm2(x0).powf(p) + lambda_r.powf(p));
    let mut notes = Vec::new();
    if samples.len() < batch.n_paths() {
        notes.push(format!(
            "{} invalid paths excluded",
            batch.n_paths() - samples.len()
        ));
    }
    Ok(make_report(
        "running-supremum moment",
        est,
        bound,
        None,
        None,
        Some(c_tilde),
        notes,
    ))
}

/// Lyapunov-weight moment check: `E[(1 + |X_T|^2)^alpha]` against
/// `c_tilde exp(c_tilde lambda) (1 + |x0|^2)^alpha`. Negative exponents
/// probe integrability of inverse moments.
pub fn lyapunov_moment_check<T: Real>(
    batch: &PathBatch<T>,
    x0: &[T],
    alpha: T,
    lambda_r: T,
    c_tilde: T,
) -> Result<BoundReport<T>> {
    if !alpha.is_finite() {
        return Err(Error::Parameter("exponent must be finite".into()));
    }
    let samples: Vec<T> = (0..batch.n_paths())
        .filter(|&pth| batch.valid[pth])
        .map(|pth| {
            let x = batch.final_state(pth);
            let q = T::one() + norm2(x) * norm2(x);
            q.powf(alpha)
        })
        .collect();
    let est = MonteCarloEstimate::from_samples(&samples, 0)?;
    let base = T::one() + norm2(x0) * norm2(x0);
    let bound = c_tilde * (c_tilde * lambda_r).exp() * base.powf(alpha);
    Ok(make_report(
        "lyapunov-weight moment",
        est,
        bound,
        None,
        None,
        Some(c_tilde),
        Vec::new(),
    ))
}

/// Coupled two-point moment: mean of `|X_t(x) - X_t(y)|^alpha` over the
/// endpoint gaps of a coupled batch, for any real `alpha` including
/// negative orders. Pairs whose gap falls below `eps_floor` are excluded
/// and counted.
pub fn two_point_moment<T: Real>(
    tp: &TwoPointBatch<T>,
    alpha: T,
    eps_floor: T,
) -> Result<MonteCarloEstimate<T>> {
    if alpha < T::zero() && !(eps_floor > T::zero()) {
        return Err(Error::Parameter(
            "negative moments need a positive clipping floor".into(),
        ));
    }
    let d = tp.first.dim;
    let mut samples = Vec::with_capacity(tp.first.n_paths());
    let mut clipped = 0usize;
    for pth in 0..tp.first.n_paths() {
        if !(tp.first.valid[pth] && tp.second.valid[pth]) {
            continue;
        }
        let a = tp.first.final_state(pth);
        let b = tp.second.final_state(pth);
        let mut gap2 = T::zero();
        for i in 0..d {
            let delta = a[i] - b[i];
            gap2 += delta * delta;
        }
        let gap = gap2.sqrt();
        if gap < eps_floor {
            clipped += 1;
            continue;
        }
        samples.push(gap.powf(alpha));
    }
    if samples.is_empty() {
        return Err(Error::Degenerate(format!(
            "all {clipped} surviving pairs fell below the clipping floor {eps_floor}"
        )));
    }
    MonteCarloEstimate::from_samples(&samples, clipped)
}

/// Two-point moment as a report against
/// `c_tilde exp(c_tilde lambda^(p1/(p1-d))) |x - y|^alpha`.
pub fn two_point_check<T: Real>(
    tp: &TwoPointBatch<T>,
    alpha: T,
    eps_floor: T,
    lambda_r: T,
    p1: T,
    c_tilde: T,
) -> Result<BoundReport<T>> {
    let est = two_point_moment(tp, alpha, eps_floor)?;
    let d = T::of(tp.first.dim as f64);
    if !(p1 > d) {
        return Err(Error::Parameter(format!(
            "integrability order p1 = {p1} must exceed the dimension {d}"
        )));
    }
    let growth = lambda_r.powf(p1 / (p1 - d));
    let bound = c_tilde * (c_tilde * growth).exp() * tp.start_gap().powf(alpha);
    let notes = if est.clipped_count > 0 {
        vec![format!("{} pairs clipped at the floor", est.clipped_count)]
    } else {
        Vec::new()
    };
    Ok(make_report(
        "two-point moment",
        est,
        bound,
        None,
        None,
        Some(c_tilde),
        notes,
    ))
}

/// Discrete stochastic-exponential decomposition of a coupled pair: the
/// drift and noise loadings of `|Z_t|^alpha` for the difference process
/// `Z = Y(x) - Y(y)` in transformed coordinates, with the per-path
/// reconstruction error of the exponential formula.
#[derive(Debug, Clone)]
pub struct TwoPointDecomposition<T> {
    pub times: Vec<T>,
    /// Drift loading per step, `[path][step]` (empty unless series storage
    /// was requested).
    pub a_series: Vec<Vec<T>>,
    /// Noise loading per step, `[path][step * w_dim ..]`.
    pub b_series: Vec<Vec<T>>,
    /// Difference process at the recorded times, `[path][time * d ..]`.
    pub z_series: Vec<Vec<T>>,
    /// `sum_k B_k . dW_k` per path.
    pub stoch_integral: Vec<T>,
    /// `sum_k |B_k|^2 dt` per path.
    pub quad_variation: Vec<T>,
    /// `sum_k A_k dt` per path.
    pub drift_integral: Vec<T>,
    /// Mean over retained paths of
    /// `max_t | |Z_t|^a - |Z_0|^a exp(S_t) | / |Z_0|^a`.
    pub reconstruction_error: T,
    pub per_path_error: Vec<T>,
    /// True where the gap fell below the floor and the series was
    /// truncated at that time.
    pub truncated: Vec<bool>,
    pub n_retained: usize,
}

impl<T: Real> TwoPointDecomposition<T> {
    /// `exp(int B dW - 1/2 int |B|^2 dt)` per retained path; its mean
    /// estimates 1 when the noise loading is a true martingale exponent.
    pub fn martingale_samples(&self) -> Vec<T> {
        let half = T::of(0.5);
        self.stoch_integral
            .iter()
            .zip(&self.quad_variation)
            .zip(&self.truncated)
            .filter(|&(_, &trunc)| !trunc)
            .map(|((&s, &q), _)| (s - half * q).exp())
            .collect()
    }
}

/// Decompose a coupled batch: replay the driving increments from the
/// batch's stream key, evaluate the drift/noise loadings along the
/// recorded states, and reconstruct `|Z_t|^alpha` from the discrete
/// stochastic exponential. The batch must be recorded at stride 1.
pub fn doleans_decompose<T: Real>(
    tp: &TwoPointBatch<T>,
    tf: &TransformedField<T>,
    alpha: T,
    eps_floor: T,
    store_series: bool,
) -> Result<TwoPointDecomposition<T>> {
    if alpha == T::zero() || !alpha.is_finite() {
        return Err(Error::Parameter(format!(
            "decomposition exponent must be finite and nonzero, got {alpha}"
        )));
    }
    if !(eps_floor > T::zero()) {
        return Err(Error::Parameter("gap floor must be positive".into()));
    }
    require_dense(&tp.first)?;
    // The replay regenerates one increment per recorded interval, so the
    // batch must have been recorded at stride 1.
    let first_gap = tp.first.times[1] - tp.first.times[0];
    if (first_gap - tp.first.dt).abs() > T::of(1e-12) * (T::one() + tp.first.dt) {
        return Err(Error::Parameter(
            "decomposition needs a stride-1 recording (one record per step)".into(),
        ));
    }
    let d = tf.dim();
    if tp.first.dim != d {
        return Err(Error::Parameter(format!(
            "batch dimension {} does not match the field dimension {d}",
            tp.first.dim
        )));
    }
    let w_dim = tf.noise_dim();
    let n_times = tp.first.n_times();
    let n_steps = n_times - 1;
    let n_paths = tp.first.n_paths();
    let times = tp.first.times.clone();
    let half = T::of(0.5);

    struct PathOut<T> {
        a: Vec<T>,
        b: Vec<T>,
        z: Vec<T>,
        stoch: T,
        qv: T,
        drift: T,
        err: T,
        truncated: bool,
        retained: bool,
    }

    let outs: Vec<PathOut<T>> = (0..n_paths)
        .into_par_iter()
        .map(|pth| {
            let mut scratch = tf.scratch();
            let mut rng = path_rng(tp.first.seed, pth as u64, tp.first.segment);
            let mut dw = vec![T::zero(); w_dim];
            let mut sig_x = vec![T::zero(); d * w_dim];
            let mut sig_y = vec![T::zero(); d * w_dim];
            let mut bx = [T::zero(); MAX_DIM];
            let mut by = [T::zero(); MAX_DIM];
            let mut yx = vec![T::zero(); d];
            let mut yy = vec![T::zero(); d];
            let mut z = vec![T::zero(); d];
            let mut bvec = vec![T::zero(); w_dim];
            let mut a_ser = Vec::new();
            let mut b_ser = Vec::new();
            let mut z_ser = Vec::new();
            let mut stoch = T::zero();
            let mut qv = T::zero();
            let mut drift_int = T::zero();
            let mut err = T::zero();
            let mut truncated = false;

            let z_at = |k: usize, yx: &mut [T], yy: &mut [T], z: &mut [T]| {
                tf.map().forward(tp.first.state(pth, k), yx);
                tf.map().forward(tp.second.state(pth, k), yy);
                for i in 0..d {
                    z[i] = yx[i] - yy[i];
                }
            };
            z_at(0, &mut yx, &mut yy, &mut z);
            let z0_norm = norm2(&z);
            let retained = z0_norm >= eps_floor
                && tp.first.valid[pth]
                && tp.second.valid[pth];
            if store_series {
                z_ser.extend_from_slice(&z);
            }
            let z0_alpha = z0_norm.powf(alpha);
            for k in 0..n_steps {
                // Exact replay of the engine's schedule: nominal dt on every
                // step, remainder on the last.
                let dt = if k + 1 == n_steps {
                    *times.last().unwrap() - tp.first.dt * T::of((n_steps - 1) as f64)
                } else {
                    tp.first.dt
                };
                draw_increment(&mut rng, dt.sqrt(), &mut dw);
                if !retained || truncated {
                    continue;
                }
                let zn = norm2(&z);
                if zn < eps_floor {
                    truncated = true;
                    continue;
                }
                let z2 = zn * zn;
                let xs = tp.first.state(pth, k);
                let ys = tp.second.state(pth, k);
                tf.drift_at_x(xs, &mut bx[..d]);
                tf.drift_at_x(ys, &mut by[..d]);
                tf.diffusion_at_x(xs, &mut scratch, &mut sig_x);
                tf.diffusion_at_x(ys, &mut scratch, &mut sig_y);
                // Noise loading: alpha (sigma_x - sigma_y)^T z / |z|^2.
                let mut dsig_z2 = T::zero();
                let mut dsig_f2 = T::zero();
                for j in 0..w_dim {
                    let mut col = T::zero();
                    for i in 0..d {
                        let ds = sig_x[i * w_dim + j] - sig_y[i * w_dim + j];
                        col += ds * z[i];
                        dsig_f2 += ds * ds;
                    }
                    dsig_z2 += col * col;
                    bvec[j] = alpha * col / z2;
                }
                // Drift loading: the inner-product, Frobenius and
                // projection terms of the Ito expansion of |z|^alpha.
                let mut z_db = T::zero();
                for i in 0..d {
                    z_db += z[i] * (bx[i] - by[i]);
                }
                let a_k = alpha * z_db / z2
                    + alpha * half * dsig_f2 / z2
                    + alpha * (alpha - T::of(2.0)) * half * dsig_z2 / (z2 * z2);
                let mut b_dw = T::zero();
                let mut b2 = T::zero();
                for j in 0..w_dim {
                    b_dw += bvec[j] * dw[j];
                    b2 += bvec[j] * bvec[j];
                }
                stoch += b_dw;
                qv += b2 * dt;
                drift_int += a_k * dt;
                if store_series {
                    a_ser.push(a_k);
                    b_ser.extend_from_slice(&bvec);
                }
                z_at(k + 1, &mut yx, &mut yy, &mut z);
                if store_series {
                    z_ser.extend_from_slice(&z);
                }
                let recon = z0_alpha * (stoch - half * qv + drift_int).exp();
                let actual = norm2(&z).powf(alpha);
                err = err.max((actual - recon).abs() / z0_alpha);
            }
            PathOut {
                a: a_ser,
                b: b_ser,
                z: z_ser,
                stoch,
                qv,
                drift: drift_int,
                err,
                truncated,
                retained,
            }
        })
        .collect();

    let n_retained = outs.iter().filter(|o| o.retained).count();
    if n_retained == 0 {
        return Err(Error::Degenerate(
            "every pair started below the gap floor; nothing to decompose".into(),
        ));
    }
    let mut a_series = Vec::new();
    let mut b_series = Vec::new();
    let mut z_series = Vec::new();
    let mut stoch_integral = Vec::with_capacity(n_paths);
    let mut quad_variation = Vec::with_capacity(n_paths);
    let mut drift_integral = Vec::with_capacity(n_paths);
    let mut per_path_error = Vec::with_capacity(n_paths);
    let mut truncated = Vec::with_capacity(n_paths);
    let mut err_sum = T::zero();
    for o in outs {
        if store_series {
            a_series.push(o.a);
            b_series.push(o.b);
            z_series.push(o.z);
        }
        stoch_integral.push(o.stoch);
        quad_variation.push(o.qv);
        drift_integral.push(o.drift);
        per_path_error.push(o.err);
        truncated.push(o.truncated || !o.retained);
        if o.retained {
            err_sum += o.err;
        }
    }
    Ok(TwoPointDecomposition {
        times,
        a_series,
        b_series,
        z_series,
        stoch_integral,
        quad_variation,
        drift_integral,
        reconstruction_error: err_sum / T::of(n_retained as f64),
        per_path_error,
        truncated,
        n_retained,
    })
}

/// One row of the law-continuity table: two starts, their gap, and the
/// difference of the estimated observables with its combined uncertainty.
#[derive(Debug, Clone)]
pub struct ModulusRow<T> {
    pub gap: T,
    pub diff: T,
    pub stderr: T,
    pub value_first: T,
    pub value_second: T,
}

/// Law-continuity modulus: estimate `E[f(X_T(x))]` on a ladder of starts
/// with INDEPENDENT noise per start (continuity of laws, not of paths) and
/// tabulate `|P f(x_i) - P f(x_0)|` against `|x_i - x_0|`. Start `i` draws
/// from noise segment `cfg.segment + i`.
pub fn strong_feller_modulus<T, F>(
    tf: &TransformedField<T>,
    f: F,
    starts: &[Vec<T>],
    cfg: &SimConfig<T>,
) -> Result<Vec<ModulusRow<T>>>
where
    T: Real,
    F: Fn(&[T]) -> T + Sync,
{
    if starts.len() < 2 {
        return Err(Error::Parameter(
            "the modulus table needs at least two starts".into(),
        ));
    }
    let mut estimates = Vec::with_capacity(starts.len());
    for (i, x0) in starts.iter().enumerate() {
        let mut cfg_i = *cfg;
        cfg_i.recording = Recording::Final;
        cfg_i.segment = cfg.segment + i as u64;
        let batch = simulate_transformed(tf, x0, &cfg_i)?;
        let samples: Vec<T> = (0..batch.n_paths())
            .filter(|&pth| batch.valid[pth])
            .map(|pth| f(batch.final_state(pth)))
            .collect();
        estimates.push(MonteCarloEstimate::from_samples(&samples, 0)?);
    }
    let d = starts[0].len();
    let mut rows = Vec::with_capacity(starts.len() - 1);
    for i in 1..starts.len() {
        let mut gap2 = T::zero();
        for k in 0..d {
            let delta = starts[i][k] - starts[0][k];
            gap2 += delta * delta;
        }
        let se0 = estimates[0].stderr;
        let sei = estimates[i].stderr;
        rows.push(ModulusRow {
            gap: gap2.sqrt(),
            diff: (estimates[i].mean - estimates[0].mean).abs(),
            stderr: (se0 * se0 + sei * sei).sqrt(),
            value_first: estimates[0].mean,
            value_second: estimates[i].mean,
        });
    }
    Ok(rows)
}

/// Summary of bundle endpoint separations: the one-to-one diagnostic.
#[derive(Debug, Clone)]
pub struct InjectivityReport<T> {
    /// Smallest endpoint gap over all pairs and bundles.
    pub min_gap: T,
    /// Smallest gap among the starts.
    pub min_start_gap: T,
    /// Largest reciprocal gap over retained samples.
    pub max_reciprocal: T,
    /// Mean over bundles of the per-bundle minimum gap.
    pub mean_min_gap: T,
    pub clipped_count: usize,
    pub n_pairs: usize,
    /// True when no pair collapsed below the floor.
    pub pass: bool,
}

/// Scan a flow batch for endpoint collisions: for every bundle, the
/// minimum pairwise endpoint gap; pass when none falls below `eps_floor`.
pub fn injectivity_gap<T: Real>(flow: &FlowBatch<T>, eps_floor: T) -> Result<InjectivityReport<T>> {
    if !(eps_floor > T::zero()) {
        return Err(Error::Parameter("gap floor must be positive".into()));
    }
    let k = flow.starts.len();
    let d = flow.dim;
    let gap = |a: &[T], b: &[T]| {
        let mut g = T::zero();
        for i in 0..d {
            let delta = a[i] - b[i];
            g += delta * delta;
        }
        g.sqrt()
    };
    let mut min_start = T::of(f64::INFINITY);
    for i in 0..k {
        for j in i + 1..k {
            min_start = min_start.min(gap(&flow.starts[i], &flow.starts[j]));
        }
    }
    let mut min_gap = T::of(f64::INFINITY);
    let mut max_recip = T::zero();
    let mut clipped = 0usize;
    let mut n_pairs = 0usize;
    let mut bundle_min_sum = T::zero();
    let mut bundles = 0usize;
    for (p, row) in flow.finals.iter().enumerate() {
        if !flow.valid[p] {
            continue;
        }
        let mut bundle_min = T::of(f64::INFINITY);
        for i in 0..k {
            for j in i + 1..k {
                let g = gap(&row[i * d..(i + 1) * d], &row[j * d..(j + 1) * d]);
                n_pairs += 1;
                if g < eps_floor {
                    clipped += 1;
                } else {
                    max_recip = max_recip.max(T::one() / g);
                }
                bundle_min = bundle_min.min(g);
                min_gap = min_gap.min(g);
            }
        }
        bundle_min_sum += bundle_min;
        bundles += 1;
    }
    if bundles == 0 {
        return Err(Error::Degenerate("no valid bundles to scan".into()));
    }
    Ok(InjectivityReport {
        min_gap,
        min_start_gap: min_start,
        max_reciprocal: max_recip,
        mean_min_gap: bundle_min_sum / T::of(bundles as f64),
        clipped_count: clipped,
        n_pairs,
        pass: clipped == 0,
    })
}

/// One rung of the finite-difference gradient ladder.
#[derive(Debug, Clone)]
pub struct GradientRow<T> {
    pub h: T,
    /// `E[sup_t |X(x + h e) - X(x)|^p] / h^p`.
    pub ratio: T,
    pub stderr: T,
}

/// Finite-difference proxy for the flow-gradient moment: couple `x` and
/// `x + h e` through shared noise for each rung of a dyadic `h` ladder and
/// report `E[sup_t |gap|^p] / h^p`. Stability across rungs is the
/// Sobolev-differentiability diagnostic.
pub fn flow_gradient_moment<T: Real>(
    tf: &TransformedField<T>,
    x: &[T],
    direction: &[T],
    h_ladder: &[T],
    p: T,
    cfg: &SimConfig<T>,
) -> Result<Vec<GradientRow<T>>> {
    if h_ladder.is_empty() {
        return Err(Error::Parameter("bump ladder is empty".into()));
    }
    let dn = norm2(direction);
    if !(dn > T::zero()) {
        return Err(Error::Parameter("bump direction must be nonzero".into()));
    }
    let d = tf.dim();
    let mut rows = Vec::with_capacity(h_ladder.len());
    for &h in h_ladder {
        if !(h > T::zero()) {
            return Err(Error::Parameter(format!("bump size must be positive, got {h}")));
        }
        let mut shifted = x.to_vec();
        for i in 0..d {
            shifted[i] += h * direction[i] / dn;
        }
        let mut dense = *cfg;
        dense.recording = Recording::Stride(1);
        let tp = two_point(tf, x, &shifted, &dense)?;
        let mut samples = Vec::with_capacity(cfg.n_paths);
        for pth in 0..cfg.n_paths {
            if !(tp.first.valid[pth] && tp.second.valid[pth]) {
                continue;
            }
            let mut sup = T::zero();
            for k in 0..tp.first.n_times() {
                let a = tp.first.state(pth, k);
                let b = tp.second.state(pth, k);
                let mut g2 = T::zero();
                for i in 0..d {
                    let delta = a[i] - b[i];
                    g2 += delta * delta;
                }
                sup = sup.max(g2.sqrt());
            }
            samples.push((sup / h).powf(p));
        }
        let est = MonteCarloEstimate::from_samples(&samples, 0)?;
        rows.push(GradientRow {
            h,
            ratio: est.mean,
            stderr: est.stderr,
        });
    }
    Ok(rows)
}

/// One rung of the time-regularity ladder.
#[derive(Debug, Clone)]
pub struct HolderRow<T> {
    pub s: T,
    pub t: T,
    /// `E[|X_t - X_s|^p] / |t - s|^(p/2)`.
    pub ratio: T,
    pub stderr: T,
}

/// Time-increment moment ratios over recorded index pairs: bounded, stable
/// ratios certify the square-root modulus in time.
pub fn holder_time_check<T: Real>(
    batch: &PathBatch<T>,
    p: T,
    pairs: &[(usize, usize)],
) -> Result<Vec<HolderRow<T>>> {
    if !(p >= T::of(2.0)) {
        return Err(Error::Parameter(format!(
            "moment order must be at least 2, got {p}"
        )));
    }
    if pairs.is_empty() {
        return Err(Error::Parameter("no time pairs supplied".into()));
    }
    let d = batch.dim;
    let mut rows = Vec::with_capacity(pairs.len());
    for &(ks, kt) in pairs {
        if ks >= kt || kt >= batch.n_times() {
            return Err(Error::Parameter(format!(
                "time pair ({ks}, {kt}) out of order or range"
            )));
        }
        let dt_pow = (batch.times[kt] - batch.times[ks]).powf(p / T::of(2.0));
        let samples: Vec<T> = (0..batch.n_paths())
            .filter(|&pth| batch.valid[pth])
            .map(|pth| {
                let a = batch.state(pth, kt);
                let b = batch.state(pth, ks);
                let mut g2 = T::zero();
                for i in 0..d {
                    let delta = a[i] - b[i];
                    g2 += delta * delta;
                }
                g2.sqrt().powf(p) / dt_pow
            })
            .collect();
        let est = MonteCarloEstimate::from_samples(&samples, 0)?;
        rows.push(HolderRow {
            s: batch.times[ks],
            t: batch.times[kt],
            ratio: est.mean,
            stderr: est.stderr,
        });
    }
    Ok(rows)
}

/// Smallest `c > 0` with `c * exp(c * growth) = target`: inverts the
/// audit-constant functional form when calibrating on reference runs.
pub fn solve_audit_growth<T: Real>(target: T, growth: T) -> Result<T> {
    if !(target > T::zero()) || !target.is_finite() {
        return Err(Error::Parameter(format!(
            "calibration target must be positive and finite, got {target}"
        )));
    }
    if growth < T::zero() {
        return Err(Error::Parameter("growth argument cannot be negative".into()));
    }
    let eval = |c: T| c * (c * growth).exp();
    let mut hi = T::one();
    let mut guard = 0;
    while eval(hi) < target {
        hi = hi * T::of(2.0);
        guard += 1;
        if guard > 200 {
            return Err(Error::NonConvergence {
                what: "audit-constant bracket search exceeded its cap".into(),
                history: vec![hi.to_f64_lossy()],
            });
        }
    }
    let mut lo = T::zero();
    for _ in 0..200 {
        let mid = (lo + hi) / T::of(2.0);
        if eval(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// Calibrate the running-supremum audit constant on a reference
/// (additive-preset) transformed field: the realized ratio times a safety
/// factor of 4.
pub fn audit_sup_moment<T: Real>(
    reference: &TransformedField<T>,
    x0: &[T],
    p: T,
    lambda_r: T,
    cfg: &SimConfig<T>,
) -> Result<T> {
    let batch = simulate_transformed(reference, x0, cfg)?;
    let samples: Vec<T> = (0..batch.n_paths())
        .filter(|&pth| batch.valid[pth])
        .map(|pth| batch.max_norm[pth].powf(p))
        .collect();
    let est = MonteCarloEstimate::from_samples(&samples, 0)?;
    let core = T::one() + norm2(x0).powf(p) + lambda_r.powf(p);
    Ok(T::of(4.0) * est.mean / core)
}

/// Calibrate the Lyapunov-weight audit constant on a reference field:
/// solve the growth form for the constant matching 4x the realized ratio.
pub fn audit_lyapunov<T: Real>(
    reference: &TransformedField<T>,
    x0: &[T],
    alpha: T,
    lambda_r: T,
    cfg: &SimConfig<T>,
) -> Result<T> {
    let batch = simulate_transformed(reference, x0, cfg)?;
    let samples: Vec<T> = (0..batch.n_paths())
        .filter(|&pth| batch.valid[pth])
        .map(|pth| {
            let q = T::one() + norm2(batch.final_state(pth)).powf(T::of(2.0));
            q.powf(alpha)
        })
        .collect();
    let est = MonteCarloEstimate::from_samples(&samples, 0)?;
    let base = (T::one() + norm2(x0).powf(T::of(2.0))).powf(alpha);
    solve_audit_growth(T::of(4.0) * est.mean / base, lambda_r)
}

/// Calibrate the two-point audit constant on a reference coupled batch.
pub fn audit_two_point<T: Real>(
    tp: &TwoPointBatch<T>,
    alpha: T,
    eps_floor: T,
    lambda_r: T,
    p1: T,
) -> Result<T> {
    let est = two_point_moment(tp, alpha, eps_floor)?;
    let d = T::of(tp.first.dim as f64);
    let growth = lambda_r.powf(p1 / (p1 - d));
    let base = tp.start_gap().powf(alpha);
    solve_audit_growth(T::of(4.0) * est.mean / base, growth)
}

// ---------------------------------------------------------------------------
// Report output
// ---------------------------------------------------------------------------

fn fmt_scalar<T: Real>(v: T) -> String {
    format!("{}", v.to_f64_lossy())
}

/// Machine-readable report table. Stable across runs with equal inputs:
/// floats print in shortest round-trip form.
pub fn write_reports_csv<T: Real>(reports: &[BoundReport<T>], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        "name,mean,stderr,n_effective,clipped,bound,margin_sigmas,pass,audit_constant,c1,c2,notes"
    )?;
    for r in reports {
        let (c1, c2) = match &r.constants_used {
            Some(k) => (fmt_scalar(k.c1), fmt_scalar(k.c2)),
            None => (String::new(), String::new()),
        };
        let audit = r.audit_constant.map(fmt_scalar).unwrap_or_default();
        let notes = r.notes.join("; ").replace(',', ";");
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.name.replace(',', ";"),
            fmt_scalar(r.empirical.mean),
            fmt_scalar(r.empirical.stderr),
            r.empirical.n_effective,
            r.empirical.clipped_count,
            fmt_scalar(r.analytic_bound),
            fmt_scalar(r.margin),
            r.pass,
            audit,
            c1,
            c2,
            notes
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Human-readable summary: one line per report plus a verdict line.
pub fn write_summary<T: Real>(reports: &[BoundReport<T>], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let mut failures = 0usize;
    for r in reports {
        if !r.pass {
            failures += 1;
        }
        writeln!(
            w,
            "[{}] {}: mean={:.6e} (stderr {:.2e}, n={}) bound={:.6e} margin={:.2} sigma{}",
            if r.pass { "PASS" } else { "FAIL" },
            r.name,
            r.empirical.mean.to_f64_lossy(),
            r.empirical.stderr.to_f64_lossy(),
            r.empirical.n_effective,
            r.analytic_bound.to_f64_lossy(),
            r.margin.to_f64_lossy(),
            if r.notes.is_empty() {
                String::new()
            } else {
                format!(" [{}]", r.notes.join("; "))
            }
        )?;
    }
    if failures == 0 {
        writeln!(w, "all {} checks passed", reports.len())?;
    } else {
        writeln!(w, "{failures} of {} checks FAILED", reports.len())?;
    }
    w.flush()?;
    Ok(())
}
