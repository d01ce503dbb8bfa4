//! Path simulation for the transformed and truncated equations.
//!
//! One Euler-Maruyama engine drives everything. In transformed space the
//! state advances in `y` and the `x`-state is maintained by inverting the
//! map each step (warm-started from the previous preimage); the direct
//! engine steps the truncated equation in `x` with a grid-sampled
//! (optionally mollified) drift and the analytic widened diffusion. Both
//! consume noise identically — per path, step-major, component-minor, from
//! the counter-based stream `(seed, path, segment)` — so two runs with the
//! same configuration are driven by the very same increments, which is what
//! two-point coupling, flow bundles and cross-simulator reconstruction
//! tests rely on.
//!
//! Parallelism is an indexed map over path indices followed by a sequential
//! collect, so results are byte-identical regardless of thread count.

pub mod rng;

use std::collections::HashMap;
use std::io::{BufWriter, Read, Write as IoWrite};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::analysis;
use crate::coeffs::{AssumptionParams, CoefficientField, TruncatedField};
use crate::error::{Error, Result};
use crate::grid::{Grid, GridFunction, Interp, MAX_DIM};
use crate::real::{norm2, Real};
use crate::zvonkin::{
    build_map, map_cache_key, transform_coefficients, MapBuildOptions, TransformedField,
    ZvonkinMap,
};

/// What to keep from a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recording {
    /// Only the final state (memory-light for large batches).
    Final,
    /// The initial state, every `k`-th step, and the final state.
    Stride(usize),
}

/// Batch configuration shared by the simulation entry points.
#[derive(Debug, Clone, Copy)]
pub struct SimConfig<T> {
    pub t_final: T,
    pub dt: T,
    pub n_paths: usize,
    /// Base seed of the counter-based noise streams.
    pub seed: u64,
    /// Sub-stream index; patched legs bump this so each truncation level
    /// draws fresh, independent noise.
    pub segment: u64,
    pub recording: Recording,
    /// First time `|x|` reaches this radius is recorded per path.
    pub exit_radius: Option<T>,
}

impl<T: Real> SimConfig<T> {
    fn validate(&self) -> Result<usize> {
        if !(self.t_final > T::zero()) || !self.t_final.is_finite() {
            return Err(Error::Parameter(format!(
                "horizon must be positive and finite, got {}",
                self.t_final
            )));
        }
        if !(self.dt > T::zero()) || self.dt > self.t_final {
            return Err(Error::Parameter(format!(
                "step size must satisfy 0 < dt <= horizon, got {}",
                self.dt
            )));
        }
        if self.n_paths == 0 {
            return Err(Error::Parameter("need at least one path".into()));
        }
        if let Recording::Stride(0) = self.recording {
            return Err(Error::Parameter("recording stride must be positive".into()));
        }
        if let Some(r) = self.exit_radius {
            if !(r > T::zero()) {
                return Err(Error::Parameter(format!(
                    "exit radius must be positive, got {r}"
                )));
            }
        }
        let steps = (self.t_final / self.dt).ceil().to_f64_lossy() as usize;
        Ok(steps.max(1))
    }
}

/// First crossing of the exit radius.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitEvent<T> {
    pub time: T,
    pub step: usize,
    pub state: Vec<T>,
}

/// A batch of trajectories with shared recording times.
#[derive(Debug, Clone)]
pub struct PathBatch<T> {
    pub dim: usize,
    /// Recording times, shared by all paths.
    pub times: Vec<T>,
    /// Per path, `times.len() * dim` coordinates, time-major.
    pub states: Vec<Vec<T>>,
    /// First crossing of the configured exit radius, if any.
    pub exits: Vec<Option<ExitEvent<T>>>,
    /// Running supremum of `|x|` over the whole trajectory (not just the
    /// recorded instants).
    pub max_norm: Vec<T>,
    /// False if the map inversion failed mid-path; the state is frozen from
    /// that step on.
    pub valid: Vec<bool>,
    pub seed: u64,
    pub segment: u64,
    /// Nominal step size of the schedule that produced the batch (the last
    /// step may be shorter); consumers replaying increments need it to
    /// rescale draws exactly as the engine did.
    pub dt: T,
    /// Truncation radius of the field that generated the batch.
    pub r_used: T,
}

impl<T: Real> PathBatch<T> {
    pub fn n_paths(&self) -> usize {
        self.states.len()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    /// State of `path` at recorded index `k`.
    pub fn state(&self, path: usize, k: usize) -> &[T] {
        &self.states[path][k * self.dim..(k + 1) * self.dim]
    }

    /// Final recorded state of `path`.
    pub fn final_state(&self, path: usize) -> &[T] {
        self.state(path, self.n_times() - 1)
    }

    pub fn all_valid(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }

    /// First recorded index (and its time) at which `|x| >= radius`, from
    /// the stored trajectory. Online exits (`exits`) are sharper; this scan
    /// serves post-hoc radii.
    pub fn first_recorded_exit(&self, path: usize, radius: T) -> Option<(usize, T)> {
        for k in 0..self.n_times() {
            if norm2(self.state(path, k)) >= radius {
                return Some((k, self.times[k]));
            }
        }
        None
    }
}

/// Gaussian increment of one step: `out[j] ~ N(0, dt)`, drawn component by
/// component. Every consumer of a noise stream uses this one routine, so
/// increments can be replayed exactly.
pub fn draw_increment<T: Real, R: Rng>(rng: &mut R, sqrt_dt: T, out: &mut [T]) {
    for o in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *o = T::of(z) * sqrt_dt;
    }
}

struct DrivenState<T> {
    x: Vec<T>,
    y: Vec<T>,
    warm: Vec<T>,
    valid: bool,
    exit: Option<ExitEvent<T>>,
    max_norm: T,
}

struct DriveOutcome<T> {
    records: Vec<T>,
    exit: Option<ExitEvent<T>>,
    max_norm: T,
    valid: bool,
}

/// Step schedule: uniform `dt` with a shortened last step to land exactly
/// on the horizon.
fn step_dt<T: Real>(cfg: &SimConfig<T>, n_steps: usize, step: usize) -> T {
    if step + 1 == n_steps {
        let done = cfg.dt * T::of((n_steps - 1) as f64);
        cfg.t_final - done
    } else {
        cfg.dt
    }
}

fn should_record(recording: Recording, step: usize, n_steps: usize) -> bool {
    match recording {
        Recording::Final => step == n_steps,
        Recording::Stride(s) => step == n_steps || step % s == 0,
    }
}

/// Recording times implied by the schedule (identical for all paths).
fn recording_times<T: Real>(cfg: &SimConfig<T>, n_steps: usize) -> Vec<T> {
    let mut times = Vec::new();
    let mut t = T::zero();
    if should_record(cfg.recording, 0, n_steps) {
        times.push(t);
    }
    for step in 0..n_steps {
        t = if step + 1 == n_steps {
            cfg.t_final
        } else {
            t + step_dt(cfg, n_steps, step)
        };
        if should_record(cfg.recording, step + 1, n_steps) {
            times.push(t);
        }
    }
    times
}

/// Drive `starts.len()` transformed-space states along ONE shared noise
/// stream (`path`). Returns one outcome per start.
fn drive_transformed_shared<T: Real>(
    tf: &TransformedField<T>,
    starts: &[&[T]],
    cfg: &SimConfig<T>,
    n_steps: usize,
    path: u64,
) -> Result<Vec<DriveOutcome<T>>> {
    let d = tf.dim();
    let w_dim = tf.noise_dim();
    let mut scratch = tf.scratch();
    let mut sigma = vec![T::zero(); d * w_dim];
    let mut drift = [T::zero(); MAX_DIM];
    let mut states = Vec::with_capacity(starts.len());
    for &x0 in starts {
        if x0.len() != d {
            return Err(Error::Parameter(format!(
                "start point has {} coordinates, expected {d}",
                x0.len()
            )));
        }
        let mut y = vec![T::zero(); d];
        tf.map().forward(x0, &mut y);
        let x = x0.to_vec();
        let max_norm = norm2(&x);
        states.push(DrivenState {
            warm: x.clone(),
            x,
            y,
            valid: true,
            exit: None,
            max_norm,
        });
    }
    let mut records: Vec<Vec<T>> = vec![Vec::new(); starts.len()];
    if should_record(cfg.recording, 0, n_steps) {
        for (rec, st) in records.iter_mut().zip(&states) {
            rec.extend_from_slice(&st.x);
        }
    }
    let mut rng = rng::path_rng(cfg.seed, path, cfg.segment);
    let mut dw = vec![T::zero(); w_dim];
    let mut t = T::zero();
    for step in 0..n_steps {
        let dt = step_dt(cfg, n_steps, step);
        let sqrt_dt = dt.sqrt();
        draw_increment(&mut rng, sqrt_dt, &mut dw);
        t = if step + 1 == n_steps {
            cfg.t_final
        } else {
            t + dt
        };
        for st in states.iter_mut() {
            if st.valid {
                tf.drift_at_x(&st.x, &mut drift[..d]);
                tf.diffusion_at_x(&st.x, &mut scratch, &mut sigma);
                for i in 0..d {
                    let mut dy = drift[i] * dt;
                    for j in 0..w_dim {
                        dy += sigma[i * w_dim + j] * dw[j];
                    }
                    st.y[i] += dy;
                }
                st.warm.copy_from_slice(&st.x);
                match tf.map().inverse(&st.y, Some(&st.warm), &mut st.x) {
                    Ok(()) => {
                        let nrm = norm2(&st.x);
                        st.max_norm = st.max_norm.max(nrm);
                        if st.exit.is_none() {
                            if let Some(radius) = cfg.exit_radius {
                                if nrm >= radius {
                                    st.exit = Some(ExitEvent {
                                        time: t,
                                        step: step + 1,
                                        state: st.x.clone(),
                                    });
                                }
                            }
                        }
                    }
                    Err(_) => {
                        // Freeze the state; the batch marks the path invalid.
                        st.x.copy_from_slice(&st.warm);
                        st.valid = false;
                    }
                }
            }
            // Frozen states keep their last x for the remaining records.
        }
        if should_record(cfg.recording, step + 1, n_steps) {
            for (rec, st) in records.iter_mut().zip(&states) {
                rec.extend_from_slice(&st.x);
            }
        }
    }
    Ok(states
        .into_iter()
        .zip(records)
        .map(|(st, records)| DriveOutcome {
            records,
            exit: st.exit,
            max_norm: st.max_norm,
            valid: st.valid,
        })
        .collect())
}

fn batch_from_outcomes<T: Real>(
    dim: usize,
    times: Vec<T>,
    outcomes: Vec<DriveOutcome<T>>,
    cfg: &SimConfig<T>,
    r_used: T,
) -> PathBatch<T> {
    let mut states = Vec::with_capacity(outcomes.len());
    let mut exits = Vec::with_capacity(outcomes.len());
    let mut max_norm = Vec::with_capacity(outcomes.len());
    let mut valid = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        states.push(o.records);
        exits.push(o.exit);
        max_norm.push(o.max_norm);
        valid.push(o.valid);
    }
    PathBatch {
        dim,
        times,
        states,
        exits,
        max_norm,
        valid,
        seed: cfg.seed,
        segment: cfg.segment,
        dt: cfg.dt,
        r_used,
    }
}

/// Simulate the transformed equation from one start for a batch of paths.
pub fn simulate_transformed<T: Real>(
    tf: &TransformedField<T>,
    x0: &[T],
    cfg: &SimConfig<T>,
) -> Result<PathBatch<T>> {
    let n_steps = cfg.validate()?;
    let times = recording_times(cfg, n_steps);
    let outcomes: Vec<Result<DriveOutcome<T>>> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|p| {
            drive_transformed_shared(tf, &[x0], cfg, n_steps, p as u64)
                .map(|mut v| v.pop().expect("one start, one outcome"))
        })
        .collect();
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(batch_from_outcomes(
        tf.dim(),
        times,
        outcomes,
        cfg,
        tf.field().r(),
    ))
}

/// Replay one transformed path, feeding every accepted step to `visit`
/// (`(step index, time, x state)`, including step 0 at time 0). This is the
/// building block for pathwise functionals that would not fit in memory as
/// full recordings.
pub fn visit_transformed<T: Real, F: FnMut(usize, T, &[T])>(
    tf: &TransformedField<T>,
    x0: &[T],
    cfg: &SimConfig<T>,
    path: u64,
    mut visit: F,
) -> Result<()> {
    let n_steps = cfg.validate()?;
    let mut replay_cfg = *cfg;
    replay_cfg.recording = Recording::Stride(1);
    let outcome = drive_transformed_shared(tf, &[x0], &replay_cfg, n_steps, path)?
        .pop()
        .expect("one start, one outcome");
    let d = tf.dim();
    let times = recording_times(&replay_cfg, n_steps);
    for (k, t) in times.iter().enumerate() {
        visit(k, *t, &outcome.records[k * d..(k + 1) * d]);
    }
    Ok(())
}

/// Two trajectories from different starts driven by the same increments,
/// path by path.
#[derive(Debug, Clone)]
pub struct TwoPointBatch<T> {
    pub x0: Vec<T>,
    pub y0: Vec<T>,
    pub first: PathBatch<T>,
    pub second: PathBatch<T>,
}

impl<T: Real> TwoPointBatch<T> {
    /// Euclidean distance between the two starts.
    pub fn start_gap(&self) -> T {
        let mut s = T::zero();
        for i in 0..self.x0.len() {
            let d = self.x0[i] - self.y0[i];
            s += d * d;
        }
        s.sqrt()
    }
}

/// Couple two starts through shared noise.
pub fn two_point<T: Real>(
    tf: &TransformedField<T>,
    x0: &[T],
    y0: &[T],
    cfg: &SimConfig<T>,
) -> Result<TwoPointBatch<T>> {
    let n_steps = cfg.validate()?;
    let times = recording_times(cfg, n_steps);
    let pairs: Vec<Result<(DriveOutcome<T>, DriveOutcome<T>)>> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|p| {
            drive_transformed_shared(tf, &[x0, y0], cfg, n_steps, p as u64).map(|mut v| {
                let b = v.pop().expect("two outcomes");
                let a = v.pop().expect("two outcomes");
                (a, b)
            })
        })
        .collect();
    let mut first = Vec::with_capacity(cfg.n_paths);
    let mut second = Vec::with_capacity(cfg.n_paths);
    for pair in pairs {
        let (a, b) = pair?;
        first.push(a);
        second.push(b);
    }
    let r = tf.field().r();
    Ok(TwoPointBatch {
        x0: x0.to_vec(),
        y0: y0.to_vec(),
        first: batch_from_outcomes(tf.dim(), times.clone(), first, cfg, r),
        second: batch_from_outcomes(tf.dim(), times, second, cfg, r),
    })
}

/// Final states of a bundle of starts driven by shared noise, one bundle
/// per path index.
#[derive(Debug, Clone)]
pub struct FlowBatch<T> {
    pub dim: usize,
    pub starts: Vec<Vec<T>>,
    /// `finals[path][k * dim ..]` is the endpoint of start `k` in bundle
    /// `path`.
    pub finals: Vec<Vec<T>>,
    pub valid: Vec<bool>,
    pub seed: u64,
    pub segment: u64,
}

/// Drive a whole bundle of starts through shared noise per path; only the
/// endpoints are kept.
pub fn flow_bundle<T: Real>(
    tf: &TransformedField<T>,
    starts: &[Vec<T>],
    cfg: &SimConfig<T>,
) -> Result<FlowBatch<T>> {
    if starts.len() < 2 {
        return Err(Error::Parameter(
            "a flow bundle needs at least two starts".into(),
        ));
    }
    let mut final_cfg = *cfg;
    final_cfg.recording = Recording::Final;
    let n_steps = final_cfg.validate()?;
    let d = tf.dim();
    let refs: Vec<&[T]> = starts.iter().map(|s| s.as_slice()).collect();
    let rows: Vec<Result<(Vec<T>, bool)>> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|p| {
            drive_transformed_shared(tf, &refs, &final_cfg, n_steps, p as u64).map(|outs| {
                let mut row = Vec::with_capacity(starts.len() * d);
                let mut ok = true;
                for o in outs {
                    row.extend_from_slice(&o.records);
                    ok &= o.valid;
                }
                (row, ok)
            })
        })
        .collect();
    let mut finals = Vec::with_capacity(cfg.n_paths);
    let mut valid = Vec::with_capacity(cfg.n_paths);
    for row in rows {
        let (r, ok) = row?;
        finals.push(r);
        valid.push(ok);
    }
    Ok(FlowBatch {
        dim: d,
        starts: starts.to_vec(),
        finals,
        valid,
        seed: cfg.seed,
        segment: cfg.segment,
    })
}

/// Sample the truncated drift on a grid for the direct engine, optionally
/// mollified at scale `1/n` (the widened diffusion stays analytic). The box
/// must contain the drift support plus the mollification collar.
pub fn direct_drift_grid<T: Real>(
    field: &TruncatedField<T>,
    grid: &Grid<T>,
    mollifier_scale: Option<T>,
) -> Result<GridFunction<T>> {
    if field.dim() != grid.dim() {
        return Err(Error::Parameter(format!(
            "field dimension {} does not match grid dimension {}",
            field.dim(),
            grid.dim()
        )));
    }
    let mut collar = T::of(4.0) * grid.h();
    if let Some(n) = mollifier_scale {
        if !(n > T::zero()) {
            return Err(Error::Parameter(format!(
                "mollifier scale must be positive, got {n}"
            )));
        }
        collar += T::one() / n;
    }
    if grid.l_box() < field.r() + collar {
        return Err(Error::Parameter(format!(
            "box half-width {} cannot hold the truncated drift support {} plus the collar {collar}",
            grid.l_box(),
            field.r()
        )));
    }
    let d = grid.dim();
    let raw = GridFunction::from_fn(*grid, d, |x: &[T], out: &mut [T]| field.drift_r(x, out))?;
    match mollifier_scale {
        Some(n) => analysis::mollify(&raw, n),
        None => Ok(raw),
    }
}

/// Euler-Maruyama on the truncated equation itself (no map): grid-sampled
/// drift, analytic widened diffusion. Noise consumption matches the
/// transformed engine stream for stream.
pub fn simulate_direct<T: Real>(
    field: &TruncatedField<T>,
    drift_grid: &GridFunction<T>,
    x0: &[T],
    cfg: &SimConfig<T>,
) -> Result<PathBatch<T>> {
    let n_steps = cfg.validate()?;
    let d = field.dim();
    if x0.len() != d {
        return Err(Error::Parameter(format!(
            "start point has {} coordinates, expected {d}",
            x0.len()
        )));
    }
    if drift_grid.arity() != d {
        return Err(Error::Parameter(format!(
            "drift grid must have arity {d}, got {}",
            drift_grid.arity()
        )));
    }
    let w_dim = field.noise_dim();
    let times = recording_times(cfg, n_steps);
    let outcomes: Vec<DriveOutcome<T>> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = rng::path_rng(cfg.seed, p as u64, cfg.segment);
            let mut x = x0.to_vec();
            let mut drift = [T::zero(); MAX_DIM];
            let mut sigma = vec![T::zero(); d * w_dim];
            let mut dw = vec![T::zero(); w_dim];
            let mut records = Vec::new();
            let mut exit = None;
            let mut max_norm = norm2(&x);
            if should_record(cfg.recording, 0, n_steps) {
                records.extend_from_slice(&x);
            }
            let mut t = T::zero();
            for step in 0..n_steps {
                let dt = step_dt(cfg, n_steps, step);
                draw_increment(&mut rng, dt.sqrt(), &mut dw);
                t = if step + 1 == n_steps {
                    cfg.t_final
                } else {
                    t + dt
                };
                // Drift: interpolated, exact zero outside the sampled box
                // (the truncated drift is supported in the ball of radius
                // r < box).
                drift_grid.eval_zero_outside(&x, Interp::Linear, 1, &mut drift[..d]);
                field.sigma_r(&x, &mut sigma);
                for i in 0..d {
                    let mut dx = drift[i] * dt;
                    for j in 0..w_dim {
                        dx += sigma[i * w_dim + j] * dw[j];
                    }
                    x[i] += dx;
                }
                let nrm = norm2(&x);
                max_norm = max_norm.max(nrm);
                if exit.is_none() {
                    if let Some(radius) = cfg.exit_radius {
                        if nrm >= radius {
                            exit = Some(ExitEvent {
                                time: t,
                                step: step + 1,
                                state: x.clone(),
                            });
                        }
                    }
                }
                if should_record(cfg.recording, step + 1, n_steps) {
                    records.extend_from_slice(&x);
                }
            }
            DriveOutcome {
                records,
                exit,
                max_norm,
                valid: true,
            }
        })
        .collect();
    Ok(batch_from_outcomes(d, times, outcomes, cfg, field.r()))
}

/// Mean (and standard error) over paths of the trajectory-sup distance
/// between the transformed and the direct simulation of the same truncated
/// equation, driven by identical noise. Shrinks with `dt`; it is the
/// operational check that the map-based simulation solves the equation it
/// claims to solve.
pub fn reconstruction_gap<T: Real>(
    tf: &TransformedField<T>,
    drift_grid: &GridFunction<T>,
    x0: &[T],
    cfg: &SimConfig<T>,
) -> Result<(T, T)> {
    let mut rec_cfg = *cfg;
    rec_cfg.recording = Recording::Stride(1);
    let transformed = simulate_transformed(tf, x0, &rec_cfg)?;
    let direct = simulate_direct(tf.field(), drift_grid, x0, &rec_cfg)?;
    let d = tf.dim();
    let n_times = transformed.n_times();
    let mut gaps = Vec::with_capacity(cfg.n_paths);
    for p in 0..cfg.n_paths {
        let mut sup = T::zero();
        for k in 0..n_times {
            let a = transformed.state(p, k);
            let b = direct.state(p, k);
            let mut dist2 = T::zero();
            for i in 0..d {
                let delta = a[i] - b[i];
                dist2 += delta * delta;
            }
            sup = sup.max(dist2.sqrt());
        }
        gaps.push(sup);
    }
    let n = T::of(gaps.len() as f64);
    let mean = gaps.iter().copied().sum::<T>() / n;
    let var = gaps
        .iter()
        .map(|&g| (g - mean) * (g - mean))
        .sum::<T>()
        / (n - T::one()).max(T::one());
    Ok((mean, (var / n).sqrt()))
}

/// In-memory plus optional on-disk cache of solved maps, keyed by the
/// deterministic build digest.
pub struct MapCache<T> {
    disk_dir: Option<PathBuf>,
    mem: Mutex<HashMap<String, Arc<ZvonkinMap<T>>>>,
}

impl<T: Real> MapCache<T> {
    pub fn new(disk_dir: Option<PathBuf>) -> Self {
        MapCache {
            disk_dir,
            mem: Mutex::new(HashMap::new()),
        }
    }

    /// Fetch the map for this build, loading from disk or solving (and
    /// persisting) on miss.
    pub fn get_or_build(
        &self,
        grid: &Grid<T>,
        field: &TruncatedField<T>,
        params: &AssumptionParams<T>,
        c2: T,
        opts: &MapBuildOptions<T>,
    ) -> Result<Arc<ZvonkinMap<T>>> {
        let key = map_cache_key(field, grid, params, opts.lambda, opts.interp, opts.picard.tol);
        let mut mem = self
            .mem
            .lock()
            .map_err(|_| Error::Parameter("map cache poisoned by an earlier panic".into()))?;
        if let Some(hit) = mem.get(&key) {
            return Ok(hit.clone());
        }
        if let Some(dir) = &self.disk_dir {
            let path = dir.join(&key);
            if path.join("manifest.toml").exists() {
                let map = Arc::new(ZvonkinMap::<T>::load(&path, Some(&key))?);
                mem.insert(key, map.clone());
                return Ok(map);
            }
        }
        let map = Arc::new(build_map(grid, field, params, c2, opts)?);
        if let Some(dir) = &self.disk_dir {
            map.save(&dir.join(&key), &key)?;
        }
        mem.insert(key, map.clone());
        Ok(map)
    }

    pub fn len(&self) -> usize {
        self.mem.lock().map(|m| m.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Configuration of the patched global construction.
#[derive(Debug, Clone)]
pub struct PatchConfig<T> {
    /// Innermost truncation radius.
    pub r0: T,
    /// Radius growth per level.
    pub growth: T,
    /// Levels available before a path is declared exhausted.
    pub max_levels: usize,
    /// Box half-width per unit truncation radius (>= 3 keeps the full
    /// cutoff collar inside the box).
    pub box_factor: T,
    /// Grid resolution per level.
    pub n: usize,
    pub map_opts: MapBuildOptions<T>,
    pub sim: SimConfig<T>,
}

/// Result of the patched construction: per-path endpoints plus how deep
/// into the radius ladder each path had to go.
#[derive(Debug, Clone)]
pub struct PatchedBatch<T> {
    pub dim: usize,
    pub finals: Vec<Vec<T>>,
    /// Highest truncation level each path used (0-based).
    pub levels_used: Vec<usize>,
    /// True when a path ran out of levels before the horizon; its endpoint
    /// is the last exit state.
    pub exhausted: Vec<bool>,
    pub valid: Vec<bool>,
    pub level_radii: Vec<T>,
}

impl<T: Real> PatchedBatch<T> {
    pub fn none_exhausted(&self) -> bool {
        self.exhausted.iter().all(|&e| !e)
    }
}

/// Glue local solutions into a global one: run on the innermost truncation
/// until the exit time, restart from the exit state on the next radius with
/// a fresh noise segment, and repeat until the horizon or the ladder runs
/// out. Maps per level come from (and go to) the cache.
pub fn patch_global<T: Real>(
    base: &CoefficientField<T>,
    params: &AssumptionParams<T>,
    c2: T,
    x0: &[T],
    cfg: &PatchConfig<T>,
    cache: &MapCache<T>,
) -> Result<PatchedBatch<T>> {
    if cfg.max_levels == 0 {
        return Err(Error::Parameter("need at least one truncation level".into()));
    }
    if !(cfg.growth > T::one()) {
        return Err(Error::Parameter(format!(
            "radius growth must exceed 1, got {}",
            cfg.growth
        )));
    }
    cfg.sim.validate()?;
    // Prepare all levels up front; the cache deduplicates across calls.
    let mut levels: Vec<(T, Arc<TransformedField<T>>)> = Vec::with_capacity(cfg.max_levels);
    let mut radius = cfg.r0;
    for _ in 0..cfg.max_levels {
        let field = crate::coeffs::truncate(base, radius, params)?;
        let l_box = cfg.box_factor * radius;
        let grid = Grid::new(base.dim(), cfg.n, l_box)?;
        let map = cache.get_or_build(&grid, &field, params, c2, &cfg.map_opts)?;
        let tf = Arc::new(transform_coefficients(map, field)?);
        levels.push((radius, tf));
        radius = radius * cfg.growth;
    }
    let level_radii: Vec<T> = levels.iter().map(|(r, _)| *r).collect();
    let d = base.dim();
    let rows: Vec<Result<(Vec<T>, usize, bool, bool)>> = (0..cfg.sim.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut x = x0.to_vec();
            let mut remaining = cfg.sim.t_final;
            let mut level = 0usize;
            loop {
                let (r_level, tf) = &levels[level];
                let leg_cfg = SimConfig {
                    t_final: remaining,
                    dt: cfg.sim.dt.min(remaining),
                    n_paths: 1,
                    seed: cfg.sim.seed,
                    segment: cfg.sim.segment + level as u64,
                    recording: Recording::Final,
                    exit_radius: Some(*r_level),
                };
                let n_steps = leg_cfg.validate()?;
                let outcome =
                    drive_transformed_shared(tf, &[&x], &leg_cfg, n_steps, p as u64)?
                        .pop()
                        .expect("one outcome");
                if !outcome.valid {
                    return Ok((x, level, false, false));
                }
                match outcome.exit {
                    None => {
                        let final_x = outcome.records[outcome.records.len() - d..].to_vec();
                        return Ok((final_x, level, false, true));
                    }
                    Some(ev) => {
                        remaining = remaining - ev.time;
                        x = ev.state;
                        if remaining <= T::zero() {
                            return Ok((x, level, false, true));
                        }
                        if level + 1 >= cfg.max_levels {
                            return Ok((x, level, true, true));
                        }
                        level += 1;
                    }
                }
            }
        })
        .collect();
    let mut finals = Vec::with_capacity(cfg.sim.n_paths);
    let mut levels_used = Vec::with_capacity(cfg.sim.n_paths);
    let mut exhausted = Vec::with_capacity(cfg.sim.n_paths);
    let mut valid = Vec::with_capacity(cfg.sim.n_paths);
    for row in rows {
        let (f, l, e, v) = row?;
        finals.push(f);
        levels_used.push(l);
        exhausted.push(e);
        valid.push(v);
    }
    Ok(PatchedBatch {
        dim: d,
        finals,
        levels_used,
        exhausted,
        valid,
        level_radii,
    })
}

// ---------------------------------------------------------------------------
// Exports
// ---------------------------------------------------------------------------

const PATH_MAGIC: [u8; 4] = *b"PB01";

/// CSV export: `path,t,x1..xd,exited`, one row per recorded instant, floats
/// in shortest round-trip form so identical batches serialize identically.
pub fn write_paths_csv<T: Real>(batch: &PathBatch<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write!(w, "path,t")?;
    for i in 1..=batch.dim {
        write!(w, ",x{i}")?;
    }
    writeln!(w, ",exited")?;
    for p in 0..batch.n_paths() {
        for k in 0..batch.n_times() {
            write!(w, "{p},{}", batch.times[k])?;
            for v in batch.state(p, k) {
                write!(w, ",{v}")?;
            }
            let exited = match &batch.exits[p] {
                Some(ev) => batch.times[k] >= ev.time,
                None => false,
            };
            writeln!(w, ",{}", u8::from(exited))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Binary export of a batch (little-endian, f64 payload).
pub fn write_paths_binary<T: Real>(batch: &PathBatch<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&PATH_MAGIC)?;
    w.write_all(&(batch.dim as u32).to_le_bytes())?;
    w.write_all(&(batch.n_paths() as u64).to_le_bytes())?;
    w.write_all(&(batch.n_times() as u64).to_le_bytes())?;
    w.write_all(&batch.seed.to_le_bytes())?;
    w.write_all(&batch.segment.to_le_bytes())?;
    w.write_all(&batch.dt.to_f64_lossy().to_le_bytes())?;
    w.write_all(&batch.r_used.to_f64_lossy().to_le_bytes())?;
    for t in &batch.times {
        w.write_all(&t.to_f64_lossy().to_le_bytes())?;
    }
    for p in 0..batch.n_paths() {
        w.write_all(&[u8::from(batch.valid[p])])?;
        match &batch.exits[p] {
            None => w.write_all(&[0u8])?,
            Some(ev) => {
                w.write_all(&[1u8])?;
                w.write_all(&ev.time.to_f64_lossy().to_le_bytes())?;
                w.write_all(&(ev.step as u64).to_le_bytes())?;
                for v in &ev.state {
                    w.write_all(&v.to_f64_lossy().to_le_bytes())?;
                }
            }
        }
        w.write_all(&batch.max_norm[p].to_f64_lossy().to_le_bytes())?;
        for v in &batch.states[p] {
            w.write_all(&v.to_f64_lossy().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a batch written by [`write_paths_binary`].
pub fn read_paths_binary<T: Real>(path: &Path) -> Result<PathBatch<T>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for a path-batch header".into()))?;
    if magic != PATH_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            magic, PATH_MAGIC
        )));
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u32buf)?;
    let dim = u32::from_le_bytes(u32buf) as usize;
    if dim == 0 || dim > MAX_DIM {
        return Err(Error::Format(format!("implausible dimension {dim}")));
    }
    r.read_exact(&mut u64buf)?;
    let n_paths = u64::from_le_bytes(u64buf) as usize;
    r.read_exact(&mut u64buf)?;
    let n_times = u64::from_le_bytes(u64buf) as usize;
    if n_times == 0 {
        return Err(Error::Format("batch without recorded times".into()));
    }
    r.read_exact(&mut u64buf)?;
    let seed = u64::from_le_bytes(u64buf);
    r.read_exact(&mut u64buf)?;
    let segment = u64::from_le_bytes(u64buf);
    let mut f64buf = [0u8; 8];
    let mut read_f = |r: &mut dyn Read| -> Result<T> {
        r.read_exact(&mut f64buf)
            .map_err(|_| Error::Format("truncated path batch".into()))?;
        Ok(T::of(f64::from_le_bytes(f64buf)))
    };
    let dt = read_f(&mut r)?;
    let r_used = read_f(&mut r)?;
    let mut times = Vec::with_capacity(n_times);
    for _ in 0..n_times {
        times.push(read_f(&mut r)?);
    }
    let mut states = Vec::with_capacity(n_paths);
    let mut exits = Vec::with_capacity(n_paths);
    let mut max_norm = Vec::with_capacity(n_paths);
    let mut valid = Vec::with_capacity(n_paths);
    let mut byte = [0u8; 1];
    for _ in 0..n_paths {
        r.read_exact(&mut byte)
            .map_err(|_| Error::Format("truncated path batch".into()))?;
        valid.push(byte[0] != 0);
        r.read_exact(&mut byte)
            .map_err(|_| Error::Format("truncated path batch".into()))?;
        if byte[0] != 0 {
            let time = read_f(&mut r)?;
            let mut stepbuf = [0u8; 8];
            r.read_exact(&mut stepbuf)
                .map_err(|_| Error::Format("truncated path batch".into()))?;
            let step = u64::from_le_bytes(stepbuf) as usize;
            let mut state = Vec::with_capacity(dim);
            for _ in 0..dim {
                state.push(read_f(&mut r)?);
            }
            exits.push(Some(ExitEvent { time, step, state }));
        } else {
            exits.push(None);
        }
        max_norm.push(read_f(&mut r)?);
        let mut row = Vec::with_capacity(n_times * dim);
        for _ in 0..n_times * dim {
            row.push(read_f(&mut r)?);
        }
        states.push(row);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after path batch".into()));
    }
    Ok(PathBatch {
        dim,
        times,
        states,
        exits,
        max_norm,
        valid,
        seed,
        segment,
        dt,
        r_used,
    })
}
