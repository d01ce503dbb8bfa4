//! Declarative scenario runner.
//!
//! A scenario is one TOML file describing a full pipeline run: the standing
//! parameters, a coefficient preset, the solver grid, the truncation radius
//! (or a radius ladder for the patched construction), the simulation batch,
//! and a list of empirical checks. [`run_scenario`] drives
//! truncate -> solve -> transform -> simulate -> estimate and writes the
//! artifact set into the output directory:
//!
//! - `maps/<key>/` — the solved map (manifest plus mesh files), keyed by a
//!   content hash so repeated runs skip the PDE solve;
//! - `reports.csv` — every selected check as one machine-readable row;
//! - `summary.txt` — one `[PASS]`/`[FAIL]` line per selected check;
//! - `scenario.txt` — the per-stage run log (also written when a stage
//!   aborts, so partial runs stay diagnosable);
//! - `paths.csv` — the baseline batch, when `export_paths` is set;
//! - `estNN_<kind>.csv` — the ladder tables of the table-producing checks;
//! - `patched_finals.csv` — per-path endpoints of a radius-ladder run.
//!
//! Config keys carry model-unit suffixes (`_time`, `_length`); everything
//! else is dimensionless. Unknown keys are rejected, and every diagnostic
//! names the offending field. A run fails (nonzero exit through the CLI)
//! exactly when some selected check fails; errors inside one check are
//! recorded as a failing report line and do not abort the others.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;

use crate::coeffs::{self, presets, AssumptionParams, CoefficientField};
use crate::error::{Error, Result};
use crate::estimators::{
    audit_lyapunov, audit_sup_moment, audit_two_point, doleans_decompose, flow_gradient_moment,
    holder_time_check, injectivity_gap, khasminskii_check, krylov_check, lyapunov_moment_check,
    make_report, strong_feller_modulus, sup_moment_check, two_point_check, write_reports_csv,
    write_summary, BoundReport, GradientRow, HolderRow, ModulusRow, MonteCarloEstimate,
};
use crate::grid::{io as grid_io, Grid, GridFunction, Interp};
use crate::pde::{
    calibrate_constants, CalibrationOptions, DriftedSolveOptions, KrylovConstants, SolverOptions,
};
use crate::real::norm2;
use crate::sim::{
    flow_bundle, patch_global, simulate_transformed, two_point, write_paths_csv, MapCache,
    PatchConfig, PatchedBatch, PathBatch, Recording, SimConfig, TwoPointBatch,
};
use crate::zvonkin::{transform_coefficients, MapBuildOptions, TransformedField};

// ---------------------------------------------------------------------------
// Configuration schema
// ---------------------------------------------------------------------------

/// One scenario: the complete, self-contained description of a run.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// Artifact directory; created if missing.
    pub output_dir: PathBuf,
    /// Write the baseline batch as `paths.csv` (fixed-radius runs only).
    #[serde(default)]
    pub export_paths: bool,
    pub params: ParamsConfig,
    pub coefficient: CoefficientConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub resolvent: ResolventConfig,
    pub truncation: TruncationConfig,
    pub sim: SimSection,
    #[serde(default)]
    pub estimators: Vec<EstimatorConfig>,
}

/// Standing assumption parameters.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsConfig {
    /// Drift integrability order; must exceed the dimension.
    pub p1: f64,
    /// Slope of the drift growth envelope (0 for compactly bounded drift).
    #[serde(default)]
    pub beta: f64,
    /// Offset of the drift growth envelope.
    #[serde(default = "default_beta_tilde")]
    pub beta_tilde: f64,
    /// Two-sided ellipticity constant of the diffusion, in (0, 1).
    pub delta: f64,
    /// Regularity exponent of the coefficient blends, in (0, 1).
    #[serde(default = "default_varpi")]
    pub varpi: f64,
}

fn default_beta_tilde() -> f64 {
    1.0
}

fn default_varpi() -> f64 {
    0.5
}

impl ParamsConfig {
    fn to_params(&self) -> AssumptionParams<f64> {
        AssumptionParams {
            p1: self.p1,
            beta: self.beta,
            beta_tilde: self.beta_tilde,
            delta: self.delta,
            varpi: self.varpi,
        }
    }
}

/// Coefficient preset selection. Only the fields of the chosen preset may
/// be set; anything else is rejected with a diagnostic naming the field.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientConfig {
    /// One of the names listed by `list-presets` under `coefficient`.
    pub preset: String,
    pub dim: usize,
    /// `constant`, `bump`: drift amplitude per component.
    pub amplitude: Option<Vec<f64>>,
    /// `bump`: length scale of the bump.
    pub width_length: Option<f64>,
    /// `singular_power`: drift strength.
    pub strength: Option<f64>,
    /// `singular_power`: singularity exponent, in (0, 1).
    pub exponent: Option<f64>,
    /// `singular_power`: support radius of the drift.
    pub support_length: Option<f64>,
    /// `custom_grid`: mesh file holding the drift components.
    pub drift_file: Option<PathBuf>,
    /// `custom_grid`: mesh file holding the diffusion matrix.
    pub sigma_file: Option<PathBuf>,
}

impl CoefficientConfig {
    fn set_fields(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.amplitude.is_some() {
            v.push("amplitude");
        }
        if self.width_length.is_some() {
            v.push("width_length");
        }
        if self.strength.is_some() {
            v.push("strength");
        }
        if self.exponent.is_some() {
            v.push("exponent");
        }
        if self.support_length.is_some() {
            v.push("support_length");
        }
        if self.drift_file.is_some() {
            v.push("drift_file");
        }
        if self.sigma_file.is_some() {
            v.push("sigma_file");
        }
        v
    }

    fn check(&self) -> Result<()> {
        if !(1..=crate::grid::MAX_DIM).contains(&self.dim) {
            return Err(Error::config(
                "coefficient.dim",
                format!("must be between 1 and {}, got {}", crate::grid::MAX_DIM, self.dim),
            ));
        }
        let required: &[&str] = match self.preset.as_str() {
            "zero" | "ou" => &[],
            "constant" => &["amplitude"],
            "bump" => &["amplitude", "width_length"],
            "singular_power" => &["strength", "exponent", "support_length"],
            "custom_grid" => &["drift_file", "sigma_file"],
            other => {
                return Err(Error::config(
                    "coefficient.preset",
                    format!("unknown preset `{other}`; run list-presets for the catalog"),
                ))
            }
        };
        for f in self.set_fields() {
            if !required.contains(&f) {
                return Err(Error::config(
                    format!("coefficient.{f}"),
                    format!("does not apply to preset `{}`", self.preset),
                ));
            }
        }
        for f in required {
            if !self.set_fields().contains(f) {
                return Err(Error::config(
                    format!("coefficient.{f}"),
                    format!("is required by preset `{}`", self.preset),
                ));
            }
        }
        if let Some(a) = &self.amplitude {
            if a.len() != self.dim {
                return Err(Error::config(
                    "coefficient.amplitude",
                    format!("needs {} components, got {}", self.dim, a.len()),
                ));
            }
        }
        if let Some(w) = self.width_length {
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::config(
                    "coefficient.width_length",
                    "must be positive and finite",
                ));
            }
        }
        Ok(())
    }

    fn build(&self) -> Result<CoefficientField<f64>> {
        match self.preset.as_str() {
            "zero" => presets::zero(self.dim),
            "constant" => presets::constant(self.dim, self.amplitude.clone().expect("validated")),
            "ou" => presets::ou(self.dim),
            "bump" => presets::bump(
                self.dim,
                self.amplitude.clone().expect("validated"),
                self.width_length.expect("validated"),
            ),
            "singular_power" => presets::singular_power(
                self.dim,
                self.strength.expect("validated"),
                self.exponent.expect("validated"),
                self.support_length.expect("validated"),
            ),
            "custom_grid" => {
                let drift_path = self.drift_file.as_ref().expect("validated");
                let sigma_path = self.sigma_file.as_ref().expect("validated");
                let (drift, interp) = grid_io::read_binary::<f64>(drift_path)?;
                let (sigma, _) = grid_io::read_binary::<f64>(sigma_path)?;
                if drift.grid().dim() != self.dim {
                    return Err(Error::config(
                        "coefficient.dim",
                        format!(
                            "is {}, but the drift mesh is {}-dimensional",
                            self.dim,
                            drift.grid().dim()
                        ),
                    ));
                }
                let descriptor = format!(
                    "custom_grid({}, {})",
                    drift_path.display(),
                    sigma_path.display()
                );
                presets::custom_grid(drift, sigma, interp, descriptor)
            }
            _ => unreachable!("check() rejected unknown presets"),
        }
    }
}

/// Solver grid of a fixed-radius run; a ladder run reuses only the
/// resolution and derives each level's box from its radius.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub points_per_axis: usize,
    /// Box half-width; required for a fixed radius, forbidden with a ladder.
    pub half_width_length: Option<f64>,
}

/// Resolvent-stage knobs. Everything has a default.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResolventConfig {
    /// Shift override; omitted selects the certified threshold.
    pub lambda: Option<f64>,
    /// Map interpolation rule: `linear` or `cubic`.
    pub interp: String,
    /// Increment tolerance of the drifted fixed-point solve.
    pub picard_tol: f64,
    pub picard_max_iter: usize,
    /// Relative residual target of the inner linear solver.
    pub solver_tol: f64,
    pub solver_max_iter: usize,
    /// Resolvent constants override; omitted calibrates both on the grid.
    pub c1: Option<f64>,
    pub c2: Option<f64>,
}

impl Default for ResolventConfig {
    fn default() -> Self {
        let picard = DriftedSolveOptions::<f64>::default();
        ResolventConfig {
            lambda: None,
            interp: "cubic".into(),
            picard_tol: picard.tol,
            picard_max_iter: picard.max_iter,
            solver_tol: picard.solver.tol,
            solver_max_iter: picard.solver.max_iter,
            c1: None,
            c2: None,
        }
    }
}

/// Either one truncation radius or a growing ladder of them.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationConfig {
    pub radius_length: Option<f64>,
    pub ladder: Option<LadderConfig>,
}

/// Radius ladder of the patched construction.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderConfig {
    pub initial_radius_length: f64,
    /// Radius growth factor per level, > 1.
    pub growth: f64,
    pub max_levels: usize,
    /// Box half-width per unit radius; at least 3 keeps the whole blend
    /// collar inside the box.
    #[serde(default = "default_box_factor")]
    pub box_factor: f64,
}

fn default_box_factor() -> f64 {
    4.0
}

impl LadderConfig {
    fn check(&self) -> Result<()> {
        if !(self.initial_radius_length >= 1.0) || !self.initial_radius_length.is_finite() {
            return Err(Error::config(
                "truncation.ladder.initial_radius_length",
                "must be at least 1",
            ));
        }
        if !(self.growth > 1.0) || !self.growth.is_finite() {
            return Err(Error::config("truncation.ladder.growth", "must exceed 1"));
        }
        if self.max_levels == 0 {
            return Err(Error::config(
                "truncation.ladder.max_levels",
                "needs at least one level",
            ));
        }
        if !(self.box_factor >= 3.0) || !self.box_factor.is_finite() {
            return Err(Error::config(
                "truncation.ladder.box_factor",
                "must be at least 3 so the blend collar stays inside the box",
            ));
        }
        Ok(())
    }
}

/// Simulation batch shared by the baseline run and (sized per estimator)
/// the auxiliary runs.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub t_final_time: f64,
    pub dt_time: f64,
    pub n_paths: usize,
    pub seed: u64,
    #[serde(default)]
    pub segment: u64,
    /// Record every k-th step; omitted keeps endpoints only. Trajectory
    /// checks (occupation integrals, time-increment ratios) need it.
    pub record_stride: Option<usize>,
    pub start: Vec<f64>,
    /// Record the first crossing of this radius per path.
    pub exit_radius_length: Option<f64>,
}

/// Pointwise observable used by the occupation and law-continuity checks.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestFunctionConfig {
    /// One of the names listed by `list-presets` under `test_function`.
    pub shape: String,
    /// `indicator_ball`: ball radius (default 1).
    pub radius_length: Option<f64>,
    /// `halfspace`: coordinate axis (default 0).
    pub axis: Option<usize>,
    /// `halfspace`: threshold (default 0).
    pub threshold_length: Option<f64>,
    /// `bump`: support radius (default 1).
    pub width_length: Option<f64>,
    /// `constant`: the value (default 1).
    pub value: Option<f64>,
}

impl TestFunctionConfig {
    fn check(&self, dim: usize, at: &str) -> Result<()> {
        let mut set: Vec<&'static str> = Vec::new();
        if self.radius_length.is_some() {
            set.push("radius_length");
        }
        if self.axis.is_some() {
            set.push("axis");
        }
        if self.threshold_length.is_some() {
            set.push("threshold_length");
        }
        if self.width_length.is_some() {
            set.push("width_length");
        }
        if self.value.is_some() {
            set.push("value");
        }
        let allowed: &[&str] = match self.shape.as_str() {
            "indicator_ball" => &["radius_length"],
            "halfspace" => &["axis", "threshold_length"],
            "bump" => &["width_length"],
            "constant" => &["value"],
            other => {
                return Err(Error::config(
                    format!("{at}.shape"),
                    format!("unknown test function `{other}`; run list-presets for the catalog"),
                ))
            }
        };
        for f in set {
            if !allowed.contains(&f) {
                return Err(Error::config(
                    format!("{at}.{f}"),
                    format!("does not apply to test function `{}`", self.shape),
                ));
            }
        }
        if let Some(r) = self.radius_length {
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::config(
                    format!("{at}.radius_length"),
                    "must be positive and finite",
                ));
            }
        }
        if let Some(a) = self.axis {
            if a >= dim {
                return Err(Error::config(
                    format!("{at}.axis"),
                    format!("must be below the dimension {dim}, got {a}"),
                ));
            }
        }
        if let Some(w) = self.width_length {
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::config(
                    format!("{at}.width_length"),
                    "must be positive and finite",
                ));
            }
        }
        if let Some(v) = self.value {
            if !v.is_finite() {
                return Err(Error::config(format!("{at}.value"), "must be finite"));
            }
        }
        Ok(())
    }
}

/// A bounded observable with a known supremum norm.
struct TestFn {
    label: String,
    sup: f64,
    eval: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
}

fn build_test_fn(cfg: &TestFunctionConfig) -> TestFn {
    match cfg.shape.as_str() {
        "indicator_ball" => {
            let r = cfg.radius_length.unwrap_or(1.0);
            TestFn {
                label: format!("indicator_ball(r={r})"),
                sup: 1.0,
                eval: Arc::new(move |x| if norm2(x) <= r { 1.0 } else { 0.0 }),
            }
        }
        "halfspace" => {
            let axis = cfg.axis.unwrap_or(0);
            let c = cfg.threshold_length.unwrap_or(0.0);
            TestFn {
                label: format!("halfspace(axis={axis}, threshold={c})"),
                sup: 1.0,
                eval: Arc::new(move |x| if x[axis] >= c { 1.0 } else { 0.0 }),
            }
        }
        "bump" => {
            let w = cfg.width_length.unwrap_or(1.0);
            TestFn {
                label: format!("bump(w={w})"),
                sup: 1.0,
                eval: Arc::new(move |x| {
                    let n = norm2(x) / w;
                    let t = n * n;
                    if t < 1.0 {
                        (1.0 - 1.0 / (1.0 - t)).exp()
                    } else {
                        0.0
                    }
                }),
            }
        }
        "constant" => {
            let v = cfg.value.unwrap_or(1.0);
            TestFn {
                label: format!("constant({v})"),
                sup: v.abs(),
                eval: Arc::new(move |_| v),
            }
        }
        _ => unreachable!("check() rejected unknown shapes"),
    }
}

fn sample_test_fn(grid: &Grid<f64>, cfg: &TestFunctionConfig) -> Result<GridFunction<f64>> {
    let tfn = build_test_fn(cfg);
    let eval = tfn.eval.clone();
    GridFunction::from_fn(*grid, 1, move |x: &[f64], out: &mut [f64]| {
        out[0] = (eval)(x);
    })
}

/// One selected check. `kind` picks the estimator; only its fields may be
/// set. Auxiliary-run estimators accept `n_paths` to size their own
/// batches; everything else shares the baseline batch.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    /// One of the names listed by `list-presets` under `estimator`.
    pub kind: String,
    /// Observable (`krylov_check`, `khasminskii_check`,
    /// `strong_feller_modulus`).
    pub f: Option<TestFunctionConfig>,
    /// Moment order.
    pub p: Option<f64>,
    /// Weight or gap exponent.
    pub alpha: Option<f64>,
    /// Exponential rate (`khasminskii_check`).
    pub rate: Option<f64>,
    /// Occupation window; defaults to the whole horizon. Endpoints must be
    /// recorded instants.
    pub window_start_time: Option<f64>,
    pub window_end_time: Option<f64>,
    /// Envelope constant; omitted calibrates it on the zero-drift
    /// reference with x4 headroom.
    pub c_tilde: Option<f64>,
    /// Second start of a coupled pair.
    pub second_start: Option<Vec<f64>>,
    /// Gap floor below which pairs are clipped (and counted).
    pub eps_floor: Option<f64>,
    /// Acceptance tolerance (`doleans_reconstruction`, default 1e-2).
    pub tolerance: Option<f64>,
    /// Start ladder (`strong_feller_modulus`, `injectivity_gap`).
    pub starts: Option<Vec<Vec<f64>>>,
    /// Displacement direction (`flow_gradient_moment`).
    pub direction: Option<Vec<f64>>,
    /// Displacement sizes (`flow_gradient_moment`).
    pub h_ladder: Option<Vec<f64>>,
    /// Recorded time pairs (`holder_time_check`).
    pub pair_times: Option<Vec<[f64; 2]>>,
    /// Max allowed max/min ratio across the gradient ladder; omitted keeps
    /// the ladder diagnostic-only.
    pub stability_factor: Option<f64>,
    /// Batch size of this estimator's own runs.
    pub n_paths: Option<usize>,
}

/// (required fields, optional fields) per estimator kind.
fn kind_spec(kind: &str) -> Option<(&'static [&'static str], &'static [&'static str])> {
    Some(match kind {
        "krylov_check" => (
            &["f", "p"][..],
            &["window_start_time", "window_end_time"][..],
        ),
        "khasminskii_check" => (&["f", "rate", "p"][..], &[][..]),
        "sup_moment_check" => (&["p"][..], &["c_tilde"][..]),
        "lyapunov_moment_check" => (&["alpha"][..], &["c_tilde"][..]),
        "two_point_check" => (
            &["second_start", "alpha"][..],
            &["eps_floor", "c_tilde", "n_paths"][..],
        ),
        "doleans_reconstruction" => (
            &["second_start", "alpha"][..],
            &["eps_floor", "tolerance", "n_paths"][..],
        ),
        "doleans_martingale" => (
            &["second_start", "alpha"][..],
            &["eps_floor", "n_paths"][..],
        ),
        "strong_feller_modulus" => (&["f", "starts"][..], &["c_tilde", "n_paths"][..]),
        "injectivity_gap" => (&["starts"][..], &["eps_floor", "n_paths"][..]),
        "flow_gradient_moment" => (
            &["direction", "h_ladder", "p"][..],
            &["stability_factor", "n_paths"][..],
        ),
        "holder_time_check" => (&["p", "pair_times"][..], &[][..]),
        _ => return None,
    })
}

/// Kinds that read the shared baseline batch instead of running their own.
const BASELINE_KINDS: &[&str] = &[
    "krylov_check",
    "khasminskii_check",
    "sup_moment_check",
    "lyapunov_moment_check",
    "holder_time_check",
];

/// Kinds whose baseline consumption walks the recorded trajectory.
const DENSE_KINDS: &[&str] = &["krylov_check", "khasminskii_check", "holder_time_check"];

fn wants_audit(est: &EstimatorConfig) -> bool {
    est.c_tilde.is_none()
        && matches!(
            est.kind.as_str(),
            "sup_moment_check" | "lyapunov_moment_check" | "two_point_check"
                | "strong_feller_modulus"
        )
}

impl EstimatorConfig {
    fn set_fields(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.f.is_some() {
            v.push("f");
        }
        if self.p.is_some() {
            v.push("p");
        }
        if self.alpha.is_some() {
            v.push("alpha");
        }
        if self.rate.is_some() {
            v.push("rate");
        }
        if self.window_start_time.is_some() {
            v.push("window_start_time");
        }
        if self.window_end_time.is_some() {
            v.push("window_end_time");
        }
        if self.c_tilde.is_some() {
            v.push("c_tilde");
        }
        if self.second_start.is_some() {
            v.push("second_start");
        }
        if self.eps_floor.is_some() {
            v.push("eps_floor");
        }
        if self.tolerance.is_some() {
            v.push("tolerance");
        }
        if self.starts.is_some() {
            v.push("starts");
        }
        if self.direction.is_some() {
            v.push("direction");
        }
        if self.h_ladder.is_some() {
            v.push("h_ladder");
        }
        if self.pair_times.is_some() {
            v.push("pair_times");
        }
        if self.stability_factor.is_some() {
            v.push("stability_factor");
        }
        if self.n_paths.is_some() {
            v.push("n_paths");
        }
        v
    }

    fn check(&self, idx: usize, dim: usize, sim: &SimSection) -> Result<()> {
        let at = |field: &str| format!("estimators[{idx}].{field}");
        let (required, optional) = kind_spec(&self.kind).ok_or_else(|| {
            Error::config(
                at("kind"),
                format!(
                    "unknown estimator `{}`; run list-presets for the catalog",
                    self.kind
                ),
            )
        })?;
        let set = self.set_fields();
        for f in &set {
            if !required.contains(f) && !optional.contains(f) {
                return Err(Error::config(
                    at(f),
                    format!("does not apply to estimator `{}`", self.kind),
                ));
            }
        }
        for f in required {
            if !set.contains(f) {
                return Err(Error::config(
                    at(f),
                    format!("is required by estimator `{}`", self.kind),
                ));
            }
        }
        if let Some(f) = &self.f {
            f.check(dim, &at("f"))?;
        }
        if let Some(p) = self.p {
            if !(p > 0.0) || !p.is_finite() {
                return Err(Error::config(at("p"), "must be positive and finite"));
            }
        }
        if let Some(a) = self.alpha {
            if !a.is_finite() {
                return Err(Error::config(at("alpha"), "must be finite"));
            }
            if a == 0.0 && self.kind.starts_with("doleans") {
                return Err(Error::config(
                    at("alpha"),
                    "must be nonzero for the decomposition",
                ));
            }
        }
        if let Some(r) = self.rate {
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::config(at("rate"), "must be positive and finite"));
            }
        }
        let w0 = self.window_start_time.unwrap_or(0.0);
        let w1 = self.window_end_time.unwrap_or(sim.t_final_time);
        if self.window_start_time.is_some() || self.window_end_time.is_some() {
            if !(w0 >= 0.0) || !(w1 > w0) || !(w1 <= sim.t_final_time) {
                return Err(Error::config(
                    at("window_start_time"),
                    format!("window [{w0}, {w1}] must be increasing inside [0, {}]", sim.t_final_time),
                ));
            }
        }
        if let Some(c) = self.c_tilde {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::config(at("c_tilde"), "must be positive and finite"));
            }
        }
        if let Some(second) = &self.second_start {
            if second.len() != dim {
                return Err(Error::config(
                    at("second_start"),
                    format!("needs {dim} components, got {}", second.len()),
                ));
            }
            if l2_gap(&sim.start, second) == 0.0 {
                return Err(Error::config(
                    at("second_start"),
                    "must differ from sim.start",
                ));
            }
        }
        if let Some(e) = self.eps_floor {
            if !(e > 0.0) || !e.is_finite() {
                return Err(Error::config(at("eps_floor"), "must be positive and finite"));
            }
        }
        if let Some(t) = self.tolerance {
            if !(t > 0.0) || !t.is_finite() {
                return Err(Error::config(at("tolerance"), "must be positive and finite"));
            }
        }
        if let Some(starts) = &self.starts {
            if starts.len() < 2 {
                return Err(Error::config(at("starts"), "needs at least two starts"));
            }
            for (k, s) in starts.iter().enumerate() {
                if s.len() != dim {
                    return Err(Error::config(
                        at("starts"),
                        format!("entry {k} needs {dim} components, got {}", s.len()),
                    ));
                }
            }
            match self.kind.as_str() {
                "injectivity_gap" => {
                    for i in 0..starts.len() {
                        for j in i + 1..starts.len() {
                            if l2_gap(&starts[i], &starts[j]) == 0.0 {
                                return Err(Error::config(
                                    at("starts"),
                                    format!("entries {i} and {j} coincide"),
                                ));
                            }
                        }
                    }
                }
                _ => {
                    for (k, s) in starts.iter().enumerate().skip(1) {
                        if l2_gap(&starts[0], s) == 0.0 {
                            return Err(Error::config(
                                at("starts"),
                                format!("entry {k} coincides with the base start"),
                            ));
                        }
                    }
                }
            }
        }
        if let Some(d) = &self.direction {
            if d.len() != dim {
                return Err(Error::config(
                    at("direction"),
                    format!("needs {dim} components, got {}", d.len()),
                ));
            }
            if norm2(d) == 0.0 {
                return Err(Error::config(at("direction"), "must be nonzero"));
            }
        }
        if let Some(h) = &self.h_ladder {
            if h.is_empty() {
                return Err(Error::config(at("h_ladder"), "needs at least one size"));
            }
            for &v in h {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(Error::config(
                        at("h_ladder"),
                        format!("sizes must be positive and finite, got {v}"),
                    ));
                }
            }
        }
        if let Some(pairs) = &self.pair_times {
            if pairs.is_empty() {
                return Err(Error::config(at("pair_times"), "needs at least one pair"));
            }
            for &[s, t] in pairs {
                if !(s >= 0.0) || !(t > s) || !(t <= sim.t_final_time + 1e-12) {
                    return Err(Error::config(
                        at("pair_times"),
                        format!("pair [{s}, {t}] must be increasing inside [0, {}]", sim.t_final_time),
                    ));
                }
            }
        }
        if let Some(sf) = self.stability_factor {
            if !(sf > 1.0) || !sf.is_finite() {
                return Err(Error::config(
                    at("stability_factor"),
                    "must exceed 1 (and be finite)",
                ));
            }
        }
        if let Some(n) = self.n_paths {
            if n == 0 {
                return Err(Error::config(at("n_paths"), "needs at least one path"));
            }
        }
        if DENSE_KINDS.contains(&self.kind.as_str()) && sim.record_stride.is_none() {
            return Err(Error::config(
                "sim.record_stride",
                format!(
                    "estimator `{}` walks the recorded trajectory; set a recording stride",
                    self.kind
                ),
            ));
        }
        Ok(())
    }
}

impl ScenarioConfig {
    /// Full schema validation; every diagnostic names the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::config("name", "must not be empty"));
        }
        self.coefficient.check()?;
        let dim = self.coefficient.dim;
        self.params.to_params().validate(dim)?;
        if self.grid.points_per_axis < 4 {
            return Err(Error::config(
                "grid.points_per_axis",
                "needs at least 4 points",
            ));
        }
        if let Some(h) = self.grid.half_width_length {
            if !(h > 0.0) || !h.is_finite() {
                return Err(Error::config(
                    "grid.half_width_length",
                    "must be positive and finite",
                ));
            }
        }
        if let Some(l) = self.resolvent.lambda {
            if !(l > 0.0) || !l.is_finite() {
                return Err(Error::config(
                    "resolvent.lambda",
                    "must be positive and finite",
                ));
            }
        }
        Interp::parse(&self.resolvent.interp)
            .map_err(|e| Error::config("resolvent.interp", e.to_string()))?;
        if !(self.resolvent.picard_tol > 0.0) || self.resolvent.picard_max_iter == 0 {
            return Err(Error::config(
                "resolvent.picard_tol",
                "tolerance must be positive and the sweep cap nonzero",
            ));
        }
        if !(self.resolvent.solver_tol > 0.0) || self.resolvent.solver_max_iter == 0 {
            return Err(Error::config(
                "resolvent.solver_tol",
                "tolerance must be positive and the iteration cap nonzero",
            ));
        }
        if self.resolvent.c1.is_some() != self.resolvent.c2.is_some() {
            return Err(Error::config(
                "resolvent.c1",
                "override both c1 and c2 or neither",
            ));
        }
        for (name, c) in [("resolvent.c1", self.resolvent.c1), ("resolvent.c2", self.resolvent.c2)] {
            if let Some(c) = c {
                if !(c > 0.0) || !c.is_finite() {
                    return Err(Error::config(name, "must be positive and finite"));
                }
            }
        }
        // Simulation section.
        if !(self.sim.t_final_time > 0.0) || !self.sim.t_final_time.is_finite() {
            return Err(Error::config(
                "sim.t_final_time",
                "must be positive and finite",
            ));
        }
        if !(self.sim.dt_time > 0.0) || self.sim.dt_time > self.sim.t_final_time {
            return Err(Error::config(
                "sim.dt_time",
                "must satisfy 0 < dt <= horizon",
            ));
        }
        if self.sim.n_paths == 0 {
            return Err(Error::config("sim.n_paths", "needs at least one path"));
        }
        if self.sim.start.len() != dim {
            return Err(Error::config(
                "sim.start",
                format!("needs {dim} components, got {}", self.sim.start.len()),
            ));
        }
        if self.sim.start.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("sim.start", "components must be finite"));
        }
        if let Some(0) = self.sim.record_stride {
            return Err(Error::config("sim.record_stride", "must be positive"));
        }
        if let Some(r) = self.sim.exit_radius_length {
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::config(
                    "sim.exit_radius_length",
                    "must be positive and finite",
                ));
            }
        }
        // Truncation: exactly one of the two variants.
        match (&self.truncation.radius_length, &self.truncation.ladder) {
            (Some(r), None) => {
                if !(*r >= 1.0) || !r.is_finite() {
                    return Err(Error::config(
                        "truncation.radius_length",
                        "must be at least 1",
                    ));
                }
                if self.grid.half_width_length.is_none() {
                    return Err(Error::config(
                        "grid.half_width_length",
                        "is required for a fixed-radius run",
                    ));
                }
            }
            (None, Some(ladder)) => {
                ladder.check()?;
                if self.grid.half_width_length.is_some() {
                    return Err(Error::config(
                        "grid.half_width_length",
                        "does not apply to a ladder run; each level uses box_factor x radius",
                    ));
                }
                if !self.estimators.is_empty() {
                    return Err(Error::config(
                        "estimators",
                        "estimator selections need a fixed truncation radius; a ladder run reports the patched construction only",
                    ));
                }
                if self.export_paths {
                    return Err(Error::config(
                        "export_paths",
                        "applies to fixed-radius runs; a ladder run writes patched_finals.csv",
                    ));
                }
                if self.sim.record_stride.is_some() {
                    return Err(Error::config(
                        "sim.record_stride",
                        "does not apply to a ladder run; only endpoints are kept",
                    ));
                }
                if self.sim.exit_radius_length.is_some() {
                    return Err(Error::config(
                        "sim.exit_radius_length",
                        "does not apply to a ladder run; exits are driven by the level radii",
                    ));
                }
            }
            (Some(_), Some(_)) => {
                return Err(Error::config(
                    "truncation",
                    "give either radius_length or a ladder table, not both",
                ));
            }
            (None, None) => {
                return Err(Error::config(
                    "truncation",
                    "needs radius_length or a ladder table",
                ));
            }
        }
        for (idx, est) in self.estimators.iter().enumerate() {
            est.check(idx, dim, &self.sim)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Preset catalog
// ---------------------------------------------------------------------------

const CATALOG: &[(&str, &str, &str)] = &[
    ("coefficient", "zero", "zero drift, identity diffusion"),
    ("coefficient", "constant", "constant drift vector, identity diffusion"),
    ("coefficient", "ou", "linear restoring drift b(x) = -x"),
    ("coefficient", "bump", "smooth gaussian-bump drift"),
    ("coefficient", "singular_power", "inward power-law drift, singular at the origin"),
    ("coefficient", "custom_grid", "drift and diffusion interpolated from mesh files"),
    ("test_function", "indicator_ball", "1 inside the centered ball, 0 outside"),
    ("test_function", "halfspace", "1 where one coordinate is at or above a threshold"),
    ("test_function", "bump", "smooth bump supported on the centered ball"),
    ("test_function", "constant", "the same value everywhere"),
    ("estimator", "krylov_check", "occupation-time integral against the resolvent bound"),
    ("estimator", "khasminskii_check", "exponential occupation functional against the partition bound"),
    ("estimator", "sup_moment_check", "running-supremum moment against its polynomial envelope"),
    ("estimator", "lyapunov_moment_check", "weight-function moment at the horizon"),
    ("estimator", "two_point_check", "coupled two-point moment against the growth bound"),
    ("estimator", "doleans_reconstruction", "pathwise stochastic-exponential reconstruction error"),
    ("estimator", "doleans_martingale", "stochastic-exponential mean-one check"),
    ("estimator", "strong_feller_modulus", "law-continuity modulus over a ladder of starts"),
    ("estimator", "injectivity_gap", "endpoint separation of shared-noise bundles"),
    ("estimator", "flow_gradient_moment", "finite-difference flow-gradient ratio ladder"),
    ("estimator", "holder_time_check", "time-increment moment ratios"),
];

/// Stable, machine-readable catalog: one `kind<TAB>name<TAB>description`
/// line per entry, identical across runs.
pub fn list_presets() -> String {
    let mut s = String::new();
    for (kind, name, desc) in CATALOG {
        s.push_str(kind);
        s.push('\t');
        s.push_str(name);
        s.push('\t');
        s.push_str(desc);
        s.push('\n');
    }
    s
}

// ---------------------------------------------------------------------------
// Entry points
// ---------------------------------------------------------------------------

/// Command-line overrides applied on top of a parsed config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

/// What a run produced, beyond the files on disk.
#[derive(Debug)]
pub struct ScenarioOutcome {
    pub name: String,
    pub out_dir: PathBuf,
    pub reports: Vec<BoundReport<f64>>,
    /// True when every selected check passed.
    pub all_pass: bool,
    /// Warnings attached to the solved map (empty for ladder runs; each
    /// level's warnings land in the run log instead).
    pub map_warnings: Vec<String>,
}

/// Parse a scenario from TOML text and validate it.
pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let cfg: ScenarioConfig = toml::from_str(text)
        .map_err(|e| Error::config("scenario", e.to_string().trim().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Read and validate a scenario file.
pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = fs::read_to_string(path)?;
    parse_config(&text)
}

/// Load a scenario file, apply overrides, and run it.
pub fn run_scenario_file(path: &Path, overrides: &Overrides) -> Result<ScenarioOutcome> {
    let mut cfg = load_config(path)?;
    if let Some(seed) = overrides.seed {
        cfg.sim.seed = seed;
    }
    if let Some(dir) = &overrides.out_dir {
        cfg.output_dir = dir.clone();
    }
    run_scenario(&cfg)
}

/// Run one scenario end to end and write its artifacts.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioOutcome> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    let base = cfg.coefficient.build()?;
    let params = cfg.params.to_params();
    let mut log = vec![
        format!("scenario: {}", cfg.name),
        format!("coefficient: {}", base.descriptor()),
    ];
    let result = match &cfg.truncation.ladder {
        Some(ladder) => run_ladder(cfg, &base, &params, ladder, &mut log),
        None => {
            let radius = cfg.truncation.radius_length.expect("validated");
            run_fixed(cfg, &base, &params, radius, &mut log)
        }
    };
    let log_path = cfg.output_dir.join("scenario.txt");
    match &result {
        Ok(_) => fs::write(&log_path, log.join("\n") + "\n")?,
        Err(e) => {
            log.push(format!("aborted: {e}"));
            let _ = fs::write(&log_path, log.join("\n") + "\n");
        }
    }
    result
}

// ---------------------------------------------------------------------------
// Fixed-radius orchestration
// ---------------------------------------------------------------------------

fn resolve_constants(
    cfg: &ScenarioConfig,
    grid: &Grid<f64>,
    field: &coeffs::TruncatedField<f64>,
    params: &AssumptionParams<f64>,
    solver: &SolverOptions<f64>,
) -> Result<KrylovConstants<f64>> {
    match (cfg.resolvent.c1, cfg.resolvent.c2) {
        (Some(c1), Some(c2)) => Ok(KrylovConstants {
            c1,
            c2,
            provenance: "configured".into(),
        }),
        (None, None) => calibrate_constants(
            grid,
            field,
            params,
            &CalibrationOptions {
                solver: *solver,
                ..Default::default()
            },
        ),
        _ => Err(Error::config(
            "resolvent.c1",
            "override both c1 and c2 or neither",
        )),
    }
}

fn map_options(cfg: &ScenarioConfig) -> Result<MapBuildOptions<f64>> {
    Ok(MapBuildOptions {
        lambda: cfg.resolvent.lambda,
        interp: Interp::parse(&cfg.resolvent.interp)?,
        picard: DriftedSolveOptions {
            tol: cfg.resolvent.picard_tol,
            max_iter: cfg.resolvent.picard_max_iter,
            solver: SolverOptions {
                tol: cfg.resolvent.solver_tol,
                max_iter: cfg.resolvent.solver_max_iter,
            },
        },
    })
}

/// Everything one estimator dispatch needs to see.
struct RunCtx<'a> {
    cfg: &'a ScenarioConfig,
    tf: &'a TransformedField<f64>,
    reference: Option<&'a TransformedField<f64>>,
    baseline: Option<&'a PathBatch<f64>>,
    grid: &'a Grid<f64>,
    lambda: f64,
    constants: &'a KrylovConstants<f64>,
    base_sim: &'a SimConfig<f64>,
}

type PairKey = (Vec<u64>, usize, bool);

fn pair_key(second: &[f64], n_paths: usize, dense: bool) -> PairKey {
    (second.iter().map(|v| v.to_bits()).collect(), n_paths, dense)
}

/// Coupled batches are shared between estimators that request the same
/// second start, batch size, and recording density; the first requester's
/// noise segment wins, which keeps reruns byte-identical.
#[allow(clippy::too_many_arguments)]
fn get_pair<'a>(
    cache: &'a mut HashMap<PairKey, TwoPointBatch<f64>>,
    tf: &TransformedField<f64>,
    x0: &[f64],
    second: &[f64],
    base: &SimConfig<f64>,
    n_paths: usize,
    dense: bool,
    segment: u64,
) -> Result<&'a TwoPointBatch<f64>> {
    let key = pair_key(second, n_paths, dense);
    if !cache.contains_key(&key) {
        let mut c = *base;
        c.n_paths = n_paths;
        c.segment = segment;
        c.recording = if dense {
            Recording::Stride(1)
        } else {
            Recording::Final
        };
        c.exit_radius = None;
        let tp = two_point(tf, x0, second, &c)?;
        cache.insert(key.clone(), tp);
    }
    Ok(cache.get(&key).expect("just inserted"))
}

fn l2_gap(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s.sqrt()
}

fn min_pairwise_gap(starts: &[Vec<f64>]) -> f64 {
    let mut min = f64::INFINITY;
    for i in 0..starts.len() {
        for j in i + 1..starts.len() {
            min = min.min(l2_gap(&starts[i], &starts[j]));
        }
    }
    min
}

/// A report standing in for a check that could not run; always fails.
fn error_report(err: &Error) -> BoundReport<f64> {
    BoundReport {
        name: String::new(),
        empirical: MonteCarloEstimate {
            mean: f64::NAN,
            stderr: f64::NAN,
            n_effective: 0,
            clipped_count: 0,
            log_mean: None,
            log_stderr: None,
        },
        analytic_bound: f64::NAN,
        log_bound: None,
        margin: f64::NEG_INFINITY,
        pass: false,
        constants_used: None,
        audit_constant: None,
        notes: vec![format!("not run: {err}")],
    }
}

/// Summary names: the estimator kind, `#k`-suffixed when selected twice.
fn display_names(ests: &[EstimatorConfig]) -> Vec<String> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for e in ests {
        *counts.entry(e.kind.as_str()).or_default() += 1;
    }
    let mut seen: HashMap<&str, usize> = HashMap::new();
    ests.iter()
        .map(|e| {
            if counts[e.kind.as_str()] > 1 {
                let k = seen.entry(e.kind.as_str()).or_default();
                *k += 1;
                format!("{}#{k}", e.kind)
            } else {
                e.kind.clone()
            }
        })
        .collect()
}

fn snap_index(batch: &PathBatch<f64>, t: f64) -> Result<usize> {
    let tol = 1e-9 * (1.0 + t.abs());
    batch
        .times
        .iter()
        .position(|&tt| (tt - t).abs() <= tol)
        .ok_or_else(|| {
            Error::config(
                "pair_times",
                format!("time {t} is not among the recorded instants"),
            )
        })
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn run_fixed(
    cfg: &ScenarioConfig,
    base: &CoefficientField<f64>,
    params: &AssumptionParams<f64>,
    radius: f64,
    log: &mut Vec<String>,
) -> Result<ScenarioOutcome> {
    let dim = base.dim();
    let field = coeffs::truncate(base, radius, params)?;
    log.push(format!("truncation radius: {radius}"));
    let half_width = cfg.grid.half_width_length.expect("validated");
    let grid = Grid::new(dim, cfg.grid.points_per_axis, half_width)?;
    log.push(format!(
        "grid: d={dim}, n={}, half-width={half_width}",
        cfg.grid.points_per_axis
    ));
    let map_opts = map_options(cfg)?;
    let constants = resolve_constants(cfg, &grid, &field, params, &map_opts.picard.solver)?;
    log.push(format!(
        "constants: c1={}, c2={} ({})",
        fmt(constants.c1),
        fmt(constants.c2),
        constants.provenance
    ));
    let cache = MapCache::new(Some(cfg.output_dir.join("maps")));
    let map = cache.get_or_build(&grid, &field, params, constants.c2, &map_opts)?;
    let lambda = map.lambda();
    let map_warnings = map.warnings().to_vec();
    log.push(format!(
        "map: lambda={}, sup|u|={}, sup|grad u|={}",
        fmt(lambda),
        fmt(map.sup_u()),
        fmt(map.sup_grad())
    ));
    for w in &map_warnings {
        log.push(format!("map warning: {w}"));
    }
    let tf = transform_coefficients(map, field)?;

    let recording = match cfg.sim.record_stride {
        Some(k) => Recording::Stride(k),
        None => Recording::Final,
    };
    let base_sim = SimConfig {
        t_final: cfg.sim.t_final_time,
        dt: cfg.sim.dt_time,
        n_paths: cfg.sim.n_paths,
        seed: cfg.sim.seed,
        segment: cfg.sim.segment,
        recording,
        exit_radius: cfg.sim.exit_radius_length,
    };
    let needs_baseline = cfg.export_paths
        || cfg
            .estimators
            .iter()
            .any(|e| BASELINE_KINDS.contains(&e.kind.as_str()));
    let baseline = if needs_baseline {
        let b = simulate_transformed(&tf, &cfg.sim.start, &base_sim)?;
        log.push(format!(
            "baseline batch: {} paths, {} recorded times",
            b.n_paths(),
            b.n_times()
        ));
        Some(b)
    } else {
        None
    };
    let reference = if cfg.estimators.iter().any(wants_audit) {
        let ref_field = coeffs::truncate(&presets::zero(dim)?, radius, params)?;
        let ref_map = cache.get_or_build(&grid, &ref_field, params, constants.c2, &map_opts)?;
        log.push("audit reference: zero-drift field on the same grid".into());
        Some(transform_coefficients(ref_map, ref_field)?)
    } else {
        None
    };

    let ctx = RunCtx {
        cfg,
        tf: &tf,
        reference: reference.as_ref(),
        baseline: baseline.as_ref(),
        grid: &grid,
        lambda,
        constants: &constants,
        base_sim: &base_sim,
    };
    let names = display_names(&cfg.estimators);
    let mut pairs: HashMap<PairKey, TwoPointBatch<f64>> = HashMap::new();
    let mut reports = Vec::with_capacity(cfg.estimators.len());
    for (idx, est) in cfg.estimators.iter().enumerate() {
        let mut rep = match run_estimator(&ctx, est, idx, &mut pairs) {
            Ok(rep) => {
                log.push(format!("estimator {idx} ({}): ok", est.kind));
                rep
            }
            Err(e) => {
                log.push(format!("estimator {idx} ({}): error: {e}", est.kind));
                error_report(&e)
            }
        };
        rep.name = names[idx].clone();
        reports.push(rep);
    }

    if cfg.export_paths {
        let b = baseline.as_ref().expect("baseline forced by export_paths");
        write_paths_csv(b, &cfg.output_dir.join("paths.csv"))?;
        log.push("paths export: paths.csv".into());
    }
    write_reports_csv(&reports, &cfg.output_dir.join("reports.csv"))?;
    write_summary(&reports, &cfg.output_dir.join("summary.txt"))?;
    let all_pass = reports.iter().all(|r| r.pass);
    log.push(format!(
        "verdict: {} of {} checks passed",
        reports.iter().filter(|r| r.pass).count(),
        reports.len()
    ));
    Ok(ScenarioOutcome {
        name: cfg.name.clone(),
        out_dir: cfg.output_dir.clone(),
        reports,
        all_pass,
        map_warnings,
    })
}

fn run_estimator(
    ctx: &RunCtx<'_>,
    est: &EstimatorConfig,
    idx: usize,
    pairs: &mut HashMap<PairKey, TwoPointBatch<f64>>,
) -> Result<BoundReport<f64>> {
    let cfg = ctx.cfg;
    let aux_segment = cfg.sim.segment + 10_000 * (idx as u64 + 1);
    let audit_segment = cfg.sim.segment + 500_000 + idx as u64;
    let est_paths = est.n_paths.unwrap_or(cfg.sim.n_paths);
    // Auxiliary runs keep the horizon and step of the baseline but draw
    // their own noise segment and record only what they need.
    let mut aux_sim = *ctx.base_sim;
    aux_sim.n_paths = est_paths;
    aux_sim.segment = aux_segment;
    aux_sim.recording = Recording::Final;
    aux_sim.exit_radius = None;
    let mut audit_sim = *ctx.base_sim;
    audit_sim.segment = audit_segment;
    audit_sim.recording = Recording::Final;
    audit_sim.exit_radius = None;
    let table_name = |kind: &str| format!("est{idx:02}_{kind}.csv");

    match est.kind.as_str() {
        "krylov_check" => {
            let b = ctx.baseline.expect("validated: dense baseline");
            let f = sample_test_fn(ctx.grid, est.f.as_ref().expect("required"))?;
            let t0 = est.window_start_time.unwrap_or(0.0);
            let t1 = est.window_end_time.unwrap_or(cfg.sim.t_final_time);
            let mut rep = krylov_check(
                b,
                &f,
                t0,
                t1,
                est.p.expect("required"),
                ctx.lambda,
                ctx.constants,
            )?;
            rep.notes
                .push(format!("f = {}", build_test_fn(est.f.as_ref().unwrap()).label));
            Ok(rep)
        }
        "khasminskii_check" => {
            let b = ctx.baseline.expect("validated: dense baseline");
            let f = sample_test_fn(ctx.grid, est.f.as_ref().expect("required"))?;
            let mut rep = khasminskii_check(
                b,
                &f,
                est.rate.expect("required"),
                est.p.expect("required"),
                ctx.lambda,
                ctx.constants,
            )?;
            rep.notes
                .push(format!("f = {}", build_test_fn(est.f.as_ref().unwrap()).label));
            Ok(rep)
        }
        "sup_moment_check" => {
            let b = ctx.baseline.expect("validated: baseline");
            let p = est.p.expect("required");
            let audited = est.c_tilde.is_none();
            let c = match est.c_tilde {
                Some(c) => c,
                None => audit_sup_moment(
                    ctx.reference.expect("validated: audit reference"),
                    &cfg.sim.start,
                    p,
                    ctx.lambda,
                    &audit_sim,
                )?,
            };
            let mut rep = sup_moment_check(b, &cfg.sim.start, p, ctx.lambda, c)?;
            if audited {
                rep.notes
                    .push("envelope constant from the zero-drift reference, x4 headroom".into());
            }
            Ok(rep)
        }
        "lyapunov_moment_check" => {
            let b = ctx.baseline.expect("validated: baseline");
            let alpha = est.alpha.expect("required");
            let audited = est.c_tilde.is_none();
            let c = match est.c_tilde {
                Some(c) => c,
                None => audit_lyapunov(
                    ctx.reference.expect("validated: audit reference"),
                    &cfg.sim.start,
                    alpha,
                    ctx.lambda,
                    &audit_sim,
                )?,
            };
            let mut rep = lyapunov_moment_check(b, &cfg.sim.start, alpha, ctx.lambda, c)?;
            if audited {
                rep.notes
                    .push("envelope constant from the zero-drift reference, x4 headroom".into());
            }
            Ok(rep)
        }
        "two_point_check" => {
            let second = est.second_start.as_ref().expect("required");
            let alpha = est.alpha.expect("required");
            let gap = l2_gap(&cfg.sim.start, second);
            let floor = est.eps_floor.unwrap_or(1e-8 * gap);
            let audited = est.c_tilde.is_none();
            let c = match est.c_tilde {
                Some(c) => c,
                None => {
                    let mut ref_sim = audit_sim;
                    ref_sim.n_paths = est_paths;
                    let ref_tp = two_point(
                        ctx.reference.expect("validated: audit reference"),
                        &cfg.sim.start,
                        second,
                        &ref_sim,
                    )?;
                    audit_two_point(&ref_tp, alpha, floor, ctx.lambda, cfg.params.p1)?
                }
            };
            let tp = get_pair(
                pairs,
                ctx.tf,
                &cfg.sim.start,
                second,
                ctx.base_sim,
                est_paths,
                false,
                aux_segment,
            )?;
            let mut rep = two_point_check(tp, alpha, floor, ctx.lambda, cfg.params.p1, c)?;
            if audited {
                rep.notes
                    .push("envelope constant from the zero-drift reference, x4 headroom".into());
            }
            Ok(rep)
        }
        "doleans_reconstruction" | "doleans_martingale" => {
            let second = est.second_start.as_ref().expect("required");
            let alpha = est.alpha.expect("required");
            let gap = l2_gap(&cfg.sim.start, second);
            let floor = est.eps_floor.unwrap_or(1e-8 * gap);
            let tp = get_pair(
                pairs,
                ctx.tf,
                &cfg.sim.start,
                second,
                ctx.base_sim,
                est_paths,
                true,
                aux_segment,
            )?;
            let dec = doleans_decompose(tp, ctx.tf, alpha, floor, false)?;
            let clipped = dec.truncated.iter().filter(|&&t| t).count();
            if est.kind == "doleans_reconstruction" {
                let samples: Vec<f64> = dec
                    .per_path_error
                    .iter()
                    .zip(&dec.truncated)
                    .filter(|(_, &t)| !t)
                    .map(|(&e, _)| e)
                    .collect();
                let mc = MonteCarloEstimate::from_samples(&samples, clipped)?;
                let tol = est.tolerance.unwrap_or(1e-2);
                let notes = vec![
                    "per-path maximum of the relative reconstruction mismatch".into(),
                    format!("{} paths retained, gap floor {}", dec.n_retained, fmt(floor)),
                ];
                Ok(make_report("pathwise reconstruction", mc, tol, None, None, None, notes))
            } else {
                let samples = dec.martingale_samples();
                let raw = MonteCarloEstimate::from_samples(&samples, clipped)?;
                let centered = MonteCarloEstimate {
                    mean: (raw.mean - 1.0).abs(),
                    stderr: raw.stderr,
                    n_effective: raw.n_effective,
                    clipped_count: raw.clipped_count,
                    log_mean: None,
                    log_stderr: None,
                };
                let notes = vec![
                    format!("raw mean {}", fmt(raw.mean)),
                    "pass requires |mean - 1| within 3 stderr of 0".into(),
                ];
                Ok(make_report(
                    "stochastic-exponential mean",
                    centered,
                    0.0,
                    None,
                    None,
                    None,
                    notes,
                ))
            }
        }
        "strong_feller_modulus" => {
            let tfn = build_test_fn(est.f.as_ref().expect("required"));
            let starts = est.starts.as_ref().expect("required");
            let eval = tfn.eval.clone();
            let rows = strong_feller_modulus(ctx.tf, move |x: &[f64]| (eval)(x), starts, &aux_sim)?;
            let table = table_name(&est.kind);
            write_modulus_csv(&rows, &cfg.output_dir.join(&table))?;
            let audited = est.c_tilde.is_none();
            let c = match est.c_tilde {
                Some(c) => c,
                None => {
                    let mut ref_sim = audit_sim;
                    ref_sim.n_paths = est_paths;
                    let eval = tfn.eval.clone();
                    let ref_rows = strong_feller_modulus(
                        ctx.reference.expect("validated: audit reference"),
                        move |x: &[f64]| (eval)(x),
                        starts,
                        &ref_sim,
                    )?;
                    let mut worst: f64 = 0.0;
                    for r in &ref_rows {
                        if r.gap > 0.0 && tfn.sup > 0.0 {
                            worst = worst.max(r.diff / (r.gap * tfn.sup));
                        }
                    }
                    4.0 * worst
                }
            };
            // The report row is the one closest to (or furthest past) its
            // own bound, so one line certifies the whole table.
            let mut worst_row: Option<(f64, &ModulusRow<f64>)> = None;
            for r in &rows {
                let bound_r = c * tfn.sup * r.gap;
                let v = if r.stderr > 0.0 {
                    (r.diff - bound_r) / r.stderr
                } else if r.diff <= bound_r {
                    f64::NEG_INFINITY
                } else {
                    f64::INFINITY
                };
                if worst_row.map_or(true, |(bv, _)| v > bv) {
                    worst_row = Some((v, r));
                }
            }
            let (_, w) = worst_row.expect("at least one row");
            let mc = MonteCarloEstimate {
                mean: w.diff,
                stderr: w.stderr,
                n_effective: est_paths,
                clipped_count: 0,
                log_mean: None,
                log_stderr: None,
            };
            let mut notes = vec![
                format!("f = {}; worst of {} rows (gap {}), table {table}", tfn.label, rows.len(), fmt(w.gap)),
            ];
            if audited {
                notes.push("modulus constant from the zero-drift reference, x4 headroom".into());
            }
            Ok(make_report(
                "law-continuity modulus",
                mc,
                c * tfn.sup * w.gap,
                None,
                None,
                Some(c),
                notes,
            ))
        }
        "injectivity_gap" => {
            let starts = est.starts.as_ref().expect("required");
            let flow = flow_bundle(ctx.tf, starts, &aux_sim)?;
            let min_start = min_pairwise_gap(starts);
            let floor = est.eps_floor.unwrap_or(1e-6 * min_start);
            let rep = injectivity_gap(&flow, floor)?;
            let ratio = if rep.min_gap > 0.0 {
                floor / rep.min_gap
            } else {
                f64::INFINITY
            };
            let mc = MonteCarloEstimate {
                mean: ratio,
                stderr: 0.0,
                n_effective: rep.n_pairs,
                clipped_count: rep.clipped_count,
                log_mean: None,
                log_stderr: None,
            };
            let notes = vec![
                format!(
                    "min endpoint gap {} vs floor {} (min start gap {})",
                    fmt(rep.min_gap),
                    fmt(floor),
                    fmt(rep.min_start_gap)
                ),
                format!(
                    "mean per-bundle min gap {}, max reciprocal {}",
                    fmt(rep.mean_min_gap),
                    fmt(rep.max_reciprocal)
                ),
                "pass requires floor/min_gap at most 1".into(),
            ];
            Ok(make_report("endpoint separation", mc, 1.0, None, None, None, notes))
        }
        "flow_gradient_moment" => {
            let direction = est.direction.as_ref().expect("required");
            let ladder = est.h_ladder.as_ref().expect("required");
            let p = est.p.expect("required");
            let rows = flow_gradient_moment(ctx.tf, &cfg.sim.start, direction, ladder, p, &aux_sim)?;
            let table = table_name(&est.kind);
            write_gradient_csv(&rows, &cfg.output_dir.join(&table))?;
            let mut lo = f64::INFINITY;
            let mut hi: f64 = 0.0;
            for r in &rows {
                lo = lo.min(r.ratio);
                hi = hi.max(r.ratio);
            }
            let spread = hi / lo;
            let mc = MonteCarloEstimate {
                mean: spread,
                stderr: 0.0,
                n_effective: rows.len(),
                clipped_count: 0,
                log_mean: None,
                log_stderr: None,
            };
            let bound = est.stability_factor.unwrap_or(f64::INFINITY);
            let mut notes = vec![format!(
                "max/min ratio across the displacement ladder; table {table}"
            )];
            if est.stability_factor.is_none() {
                notes.push("diagnostic only: no envelope asserted".into());
            }
            Ok(make_report(
                "flow-gradient ratio ladder",
                mc,
                bound,
                None,
                None,
                None,
                notes,
            ))
        }
        "holder_time_check" => {
            let b = ctx.baseline.expect("validated: dense baseline");
            let p = est.p.expect("required");
            let mut idx_pairs = Vec::new();
            for &[s, t] in est.pair_times.as_ref().expect("required") {
                idx_pairs.push((snap_index(b, s)?, snap_index(b, t)?));
            }
            let rows = holder_time_check(b, p, &idx_pairs)?;
            let table = table_name(&est.kind);
            write_holder_csv(&rows, &cfg.output_dir.join(&table))?;
            let min_row = rows
                .iter()
                .min_by(|a, b| a.ratio.total_cmp(&b.ratio))
                .expect("validated: nonempty");
            let max_row = rows
                .iter()
                .max_by(|a, b| a.ratio.total_cmp(&b.ratio))
                .expect("validated: nonempty");
            let mc = MonteCarloEstimate {
                mean: max_row.ratio - min_row.ratio,
                stderr: max_row.stderr + min_row.stderr,
                n_effective: rows.len(),
                clipped_count: 0,
                log_mean: None,
                log_stderr: None,
            };
            let notes = vec![
                format!(
                    "ratio spread across {} pairs (range [{}, {}]); table {table}",
                    rows.len(),
                    fmt(min_row.ratio),
                    fmt(max_row.ratio)
                ),
                "pass requires the spread within 3 combined stderr".into(),
            ];
            Ok(make_report("time-increment ratio spread", mc, 0.0, None, None, None, notes))
        }
        other => Err(Error::config(
            format!("estimators[{idx}].kind"),
            format!("unknown estimator `{other}`"),
        )),
    }
}

// ---------------------------------------------------------------------------
// Ladder orchestration
// ---------------------------------------------------------------------------

fn run_ladder(
    cfg: &ScenarioConfig,
    base: &CoefficientField<f64>,
    params: &AssumptionParams<f64>,
    ladder: &LadderConfig,
    log: &mut Vec<String>,
) -> Result<ScenarioOutcome> {
    let dim = base.dim();
    let r0 = ladder.initial_radius_length;
    let first_field = coeffs::truncate(base, r0, params)?;
    let first_grid = Grid::new(dim, cfg.grid.points_per_axis, ladder.box_factor * r0)?;
    let map_opts = map_options(cfg)?;
    let constants = resolve_constants(cfg, &first_grid, &first_field, params, &map_opts.picard.solver)?;
    log.push(format!(
        "constants: c1={}, c2={} ({}; calibrated on the innermost level)",
        fmt(constants.c1),
        fmt(constants.c2),
        constants.provenance
    ));
    let cache = MapCache::new(Some(cfg.output_dir.join("maps")));
    let sim = SimConfig {
        t_final: cfg.sim.t_final_time,
        dt: cfg.sim.dt_time,
        n_paths: cfg.sim.n_paths,
        seed: cfg.sim.seed,
        segment: cfg.sim.segment,
        recording: Recording::Final,
        exit_radius: None,
    };
    let pcfg = PatchConfig {
        r0,
        growth: ladder.growth,
        max_levels: ladder.max_levels,
        box_factor: ladder.box_factor,
        n: cfg.grid.points_per_axis,
        map_opts,
        sim,
    };
    let batch = patch_global(base, params, constants.c2, &cfg.sim.start, &pcfg, &cache)?;
    let radii: Vec<String> = batch.level_radii.iter().map(|&r| fmt(r)).collect();
    log.push(format!("ladder radii: {}", radii.join(" ")));
    let mut histogram = vec![0usize; batch.level_radii.len()];
    for &l in &batch.levels_used {
        histogram[l] += 1;
    }
    log.push(format!(
        "paths per deepest level: {}",
        histogram
            .iter()
            .enumerate()
            .map(|(l, c)| format!("L{l}:{c}"))
            .collect::<Vec<_>>()
            .join(" ")
    ));
    write_patched_csv(&batch, &cfg.output_dir.join("patched_finals.csv"))?;
    log.push("patched endpoints: patched_finals.csv".into());

    let n = batch.exhausted.len();
    let exhausted = batch.exhausted.iter().filter(|&&e| e).count();
    let mc = MonteCarloEstimate {
        mean: exhausted as f64 / n as f64,
        stderr: 0.0,
        n_effective: n,
        clipped_count: 0,
        log_mean: None,
        log_stderr: None,
    };
    let notes = vec![
        format!("{exhausted} of {n} paths ran out of levels before the horizon"),
        format!("radii {}", radii.join(" ")),
        "pass requires every path to finish inside the ladder".into(),
    ];
    let mut rep = make_report("patched exit ladder", mc, 0.0, None, None, None, notes);
    rep.name = "patched_exit_ladder".into();
    let reports = vec![rep];
    write_reports_csv(&reports, &cfg.output_dir.join("reports.csv"))?;
    write_summary(&reports, &cfg.output_dir.join("summary.txt"))?;
    let all_pass = reports.iter().all(|r| r.pass);
    log.push(format!(
        "verdict: {} of {} checks passed",
        reports.iter().filter(|r| r.pass).count(),
        reports.len()
    ));
    Ok(ScenarioOutcome {
        name: cfg.name.clone(),
        out_dir: cfg.output_dir.clone(),
        reports,
        all_pass,
        map_warnings: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// Table writers
// ---------------------------------------------------------------------------

fn write_modulus_csv(rows: &[ModulusRow<f64>], path: &Path) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(w, "gap,diff,stderr,value_first,value_second")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            fmt(r.gap),
            fmt(r.diff),
            fmt(r.stderr),
            fmt(r.value_first),
            fmt(r.value_second)
        )?;
    }
    w.flush()?;
    Ok(())
}

fn write_gradient_csv(rows: &[GradientRow<f64>], path: &Path) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(w, "h,ratio,stderr")?;
    for r in rows {
        writeln!(w, "{},{},{}", fmt(r.h), fmt(r.ratio), fmt(r.stderr))?;
    }
    w.flush()?;
    Ok(())
}

fn write_holder_csv(rows: &[HolderRow<f64>], path: &Path) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(w, "s,t,ratio,stderr")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", fmt(r.s), fmt(r.t), fmt(r.ratio), fmt(r.stderr))?;
    }
    w.flush()?;
    Ok(())
}

fn write_patched_csv(batch: &PatchedBatch<f64>, path: &Path) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    let mut header = String::from("path,levels_used,exhausted,valid");
    for i in 1..=batch.dim {
        header.push_str(&format!(",x{i}"));
    }
    writeln!(w, "{header}")?;
    for (p, row) in batch.finals.iter().enumerate() {
        let mut line = format!(
            "{p},{},{},{}",
            batch.levels_used[p], batch.exhausted[p], batch.valid[p]
        );
        for v in row {
            line.push(',');
            line.push_str(&fmt(*v));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A complete fixed-radius scenario exercising every estimator kind on
    /// the zero-drift preset, where each check has a clean oracle.
    fn full_toml(out: &Path) -> String {
        format!(
            r#"
name = "smoke"
output_dir = "{out}"
export_paths = true

[params]
p1 = 2.0
delta = 0.5

[coefficient]
preset = "zero"
dim = 1

[grid]
points_per_axis = 64
half_width_length = 4.0

[truncation]
radius_length = 1.0

[sim]
t_final_time = 0.25
dt_time = 0.015625
n_paths = 48
seed = 7
record_stride = 1
start = [0.0]

[[estimators]]
kind = "krylov_check"
f = {{ shape = "indicator_ball", radius_length = 1.0 }}
p = 2.0

[[estimators]]
kind = "khasminskii_check"
f = {{ shape = "constant", value = 0.5 }}
rate = 1.0
p = 2.0

[[estimators]]
kind = "sup_moment_check"
p = 2.0

[[estimators]]
kind = "lyapunov_moment_check"
alpha = -1.0

[[estimators]]
kind = "two_point_check"
second_start = [0.5]
alpha = 1.0

[[estimators]]
kind = "doleans_reconstruction"
second_start = [0.5]
alpha = 2.0

[[estimators]]
kind = "doleans_martingale"
second_start = [0.5]
alpha = 2.0

[[estimators]]
kind = "strong_feller_modulus"
f = {{ shape = "halfspace" }}
starts = [[0.0], [0.25]]

[[estimators]]
kind = "injectivity_gap"
starts = [[0.0], [0.5]]
n_paths = 32

[[estimators]]
kind = "flow_gradient_moment"
direction = [1.0]
h_ladder = [0.1, 0.01]
p = 2.0
stability_factor = 2.0

[[estimators]]
kind = "holder_time_check"
p = 2.0
pair_times = [[0.0, 0.125], [0.0625, 0.1875]]
"#,
            out = out.display()
        )
    }

    #[test]
    fn catalog_is_stable_and_matches_the_dispatcher() {
        let listing = list_presets();
        assert_eq!(listing, list_presets());
        assert!(listing.contains("\tou\t"));
        assert!(listing.contains("krylov_check"));
        // Every cataloged estimator is dispatchable and vice versa.
        for (kind, name, _) in CATALOG {
            if *kind == "estimator" {
                assert!(kind_spec(name).is_some(), "{name} not dispatchable");
            }
        }
        let cataloged: Vec<&str> = CATALOG
            .iter()
            .filter(|(k, _, _)| *k == "estimator")
            .map(|(_, n, _)| *n)
            .collect();
        for name in [
            "krylov_check",
            "khasminskii_check",
            "sup_moment_check",
            "lyapunov_moment_check",
            "two_point_check",
            "doleans_reconstruction",
            "doleans_martingale",
            "strong_feller_modulus",
            "injectivity_gap",
            "flow_gradient_moment",
            "holder_time_check",
        ] {
            assert!(cataloged.contains(&name), "{name} missing from catalog");
        }
    }

    #[test]
    fn parse_rejects_unknown_fields_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = full_toml(dir.path());
        text = text.replace("export_paths = true", "export_paths = true\nexport_pathz = 1");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("export_pathz"), "bad diagnostic: {err}");

        let mut text = full_toml(dir.path());
        text = text.replace("dt_time = 0.015625", "dtt_time = 0.015625");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("dtt_time"), "bad diagnostic: {err}");
    }

    #[test]
    fn parse_rejects_p1_at_most_the_dimension() {
        let dir = tempfile::tempdir().unwrap();
        let text = full_toml(dir.path()).replace("p1 = 2.0", "p1 = 1.0");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("p1 must exceed d"), "bad diagnostic: {err}");
    }

    #[test]
    fn estimator_validation_names_fields() {
        let dir = tempfile::tempdir().unwrap();
        let base = full_toml(dir.path());

        // Missing required field.
        let text = base.replace(
            "kind = \"sup_moment_check\"\np = 2.0",
            "kind = \"sup_moment_check\"",
        );
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(
            err.contains("estimators[2].p") && err.contains("required"),
            "bad diagnostic: {err}"
        );

        // Field of a different estimator.
        let text = base.replace(
            "kind = \"lyapunov_moment_check\"\nalpha = -1.0",
            "kind = \"lyapunov_moment_check\"\nalpha = -1.0\nrate = 1.0",
        );
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(
            err.contains("estimators[3].rate") && err.contains("does not apply"),
            "bad diagnostic: {err}"
        );

        // Unknown kind.
        let text = base.replace("kind = \"injectivity_gap\"", "kind = \"injectivity\"");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("unknown estimator"), "bad diagnostic: {err}");

        // Trajectory check without a recorded trajectory.
        let text = base.replace("record_stride = 1\n", "");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("record_stride"), "bad diagnostic: {err}");
    }

    #[test]
    fn structural_validation_names_fields() {
        let dir = tempfile::tempdir().unwrap();
        let base = full_toml(dir.path());

        // Both truncation variants at once.
        let text = base.replace(
            "[truncation]\nradius_length = 1.0",
            "[truncation]\nradius_length = 1.0\n[truncation.ladder]\ninitial_radius_length = 1.0\ngrowth = 1.5\nmax_levels = 2",
        );
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("truncation"), "bad diagnostic: {err}");

        // c2 without c1.
        let text = base.replace("[truncation]", "[resolvent]\nc2 = 0.5\n\n[truncation]");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("resolvent.c1"), "bad diagnostic: {err}");

        // Start dimension mismatch.
        let text = base.replace("start = [0.0]", "start = [0.0, 0.0]");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("sim.start"), "bad diagnostic: {err}");

        // Second start equal to the start.
        let text = base.replace("second_start = [0.5]", "second_start = [0.0]");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(
            err.contains("second_start") && err.contains("differ"),
            "bad diagnostic: {err}"
        );
    }

    #[test]
    fn full_scenario_runs_every_estimator_and_reproduces() {
        let dir_a = tempfile::tempdir().unwrap();
        let out_a = dir_a.path().join("run");
        let cfg = parse_config(&full_toml(&out_a)).unwrap();
        let outcome = run_scenario(&cfg).unwrap();
        assert_eq!(outcome.reports.len(), 11);
        for rep in &outcome.reports {
            assert!(rep.pass, "{} failed: {:?}", rep.name, rep.notes);
        }
        assert!(outcome.all_pass);

        // Artifacts.
        for file in ["reports.csv", "summary.txt", "scenario.txt", "paths.csv"] {
            assert!(out_a.join(file).exists(), "{file} missing");
        }
        assert!(out_a.join("maps").read_dir().unwrap().next().is_some());
        assert!(out_a.join("est07_strong_feller_modulus.csv").exists());
        assert!(out_a.join("est09_flow_gradient_moment.csv").exists());
        assert!(out_a.join("est10_holder_time_check.csv").exists());

        // The summary enumerates every selected estimator exactly once.
        let summary = fs::read_to_string(out_a.join("summary.txt")).unwrap();
        for est in &cfg.estimators {
            let hits = summary
                .lines()
                .filter(|l| l.contains(&format!(" {}:", est.kind)))
                .count();
            assert_eq!(hits, 1, "{} appears {hits} times", est.kind);
        }
        assert!(summary.contains("all 11 checks passed"), "{summary}");

        // Same config, fresh directory: byte-identical reports.
        let dir_b = tempfile::tempdir().unwrap();
        let out_b = dir_b.path().join("run");
        let mut cfg_b = cfg.clone();
        cfg_b.output_dir = out_b.clone();
        let outcome_b = run_scenario(&cfg_b).unwrap();
        assert!(outcome_b.all_pass);
        assert_eq!(
            fs::read(out_a.join("reports.csv")).unwrap(),
            fs::read(out_b.join("reports.csv")).unwrap()
        );
        assert_eq!(
            fs::read(out_a.join("summary.txt")).unwrap(),
            fs::read(out_b.join("summary.txt")).unwrap()
        );
        assert_eq!(
            fs::read(out_a.join("paths.csv")).unwrap(),
            fs::read(out_b.join("paths.csv")).unwrap()
        );
    }

    #[test]
    fn estimator_errors_are_recorded_without_aborting_the_run() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        // 0.13 is not on the recording lattice, so the last check errors at
        // run time; everything before it must still run.
        let text = full_toml(&out).replace("[[0.0, 0.125], [0.0625, 0.1875]]", "[[0.0, 0.13]]");
        let cfg = parse_config(&text).unwrap();
        let outcome = run_scenario(&cfg).unwrap();
        assert_eq!(outcome.reports.len(), 11);
        assert!(!outcome.all_pass);
        let bad = &outcome.reports[10];
        assert!(!bad.pass);
        assert!(bad.notes.iter().any(|n| n.contains("not run")), "{:?}", bad.notes);
        assert!(outcome.reports[..10].iter().all(|r| r.pass));
        let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
        assert!(summary.contains("1 of 11 checks FAILED"), "{summary}");
        let log = fs::read_to_string(out.join("scenario.txt")).unwrap();
        assert!(log.contains("estimator 10 (holder_time_check): error"), "{log}");
    }

    #[test]
    fn ladder_scenario_reports_exit_coverage() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let text = format!(
            r#"
name = "ladder"
output_dir = "{out}"

[params]
p1 = 2.0
delta = 0.5

[coefficient]
preset = "zero"
dim = 1

[grid]
points_per_axis = 64

[truncation.ladder]
initial_radius_length = 1.0
growth = 1.5
max_levels = 4

[sim]
t_final_time = 0.25
dt_time = 0.015625
n_paths = 32
seed = 11
start = [0.0]
"#,
            out = out.display()
        );
        let cfg = parse_config(&text).unwrap();
        let outcome = run_scenario(&cfg).unwrap();
        assert_eq!(outcome.reports.len(), 1);
        assert_eq!(outcome.reports[0].name, "patched_exit_ladder");
        assert!(outcome.all_pass, "{:?}", outcome.reports[0].notes);
        assert!(out.join("patched_finals.csv").exists());
        let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
        assert!(summary.contains("patched_exit_ladder"), "{summary}");
        let finals = fs::read_to_string(out.join("patched_finals.csv")).unwrap();
        assert!(finals.lines().next().unwrap().starts_with("path,levels_used,exhausted,valid,x1"));
        assert_eq!(finals.lines().count(), 33);

        // Ladder runs reject estimator selections up front.
        let bad = text.replace(
            "start = [0.0]",
            "start = [0.0]\n\n[[estimators]]\nkind = \"sup_moment_check\"\np = 2.0",
        );
        let err = parse_config(&bad).unwrap_err().to_string();
        assert!(err.contains("estimators"), "bad diagnostic: {err}");
    }
}
