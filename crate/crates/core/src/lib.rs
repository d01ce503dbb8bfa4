//! Regularization pipeline for stochastic differential equations whose drift
//! is too singular for classical well-posedness.
//!
//! The pipeline runs in five stages:
//!
//! 1. **Truncate** ([`coeffs`]): cut the drift off outside a ball of radius
//!    `R` and blend the diffusion to a constant elliptic far field, keeping
//!    uniform ellipticity and Holder control of the blend.
//! 2. **Solve** ([`pde`]): for each drift component, solve the drifted
//!    resolvent equation `(L - lambda) u + b . grad u = -b` on a periodic
//!    grid, with `lambda` large enough that `|u|` and `|grad u|` stay below
//!    one half.
//! 3. **Transform** ([`zvonkin`]): form the map `Phi(x) = x + u(x)`, a
//!    bi-Lipschitz change of variables that absorbs the singular drift into
//!    bounded transformed coefficients.
//! 4. **Simulate** ([`sim`]): run Euler-Maruyama on the transformed equation
//!    and pull paths back through `Phi^{-1}`; patch runs across a ladder of
//!    truncation radii via exit times.
//! 5. **Verify** ([`estimators`]): check occupation-time, exponential,
//!    moment, two-point and modulus-of-continuity bounds empirically, each as
//!    a pass/fail report against its analytic bound.
//!
//! [`analysis`] supplies the shared measure-theoretic toolbox (maximal
//! functions, mollifiers, smoothness norms) and [`scenario`] wires everything
//! to a declarative TOML configuration consumed by the `zvonkin` CLI.
//!
//! Everything numeric is generic over the scalar type via [`real::Real`];
//! the aliases below pin the shipped pipeline to `f64`.

pub mod analysis;
pub mod coeffs;
pub mod error;
pub mod estimators;
pub mod grid;
pub mod pde;
pub mod real;
pub mod scenario;
pub mod sim;
pub mod spectral;
pub mod zvonkin;

pub use error::{Error, Result};
pub use grid::{Grid, GridFunction, Interp};
pub use real::Real;

/// Scalar type of the shipped pipeline (file formats store f64).
pub type Scalar = f64;
/// Grid at the shipped precision.
pub type Grid64 = Grid<f64>;
/// Grid function at the shipped precision.
pub type GridFunction64 = GridFunction<f64>;
/// Coefficient field at the shipped precision.
pub type CoefficientField64 = coeffs::CoefficientField<f64>;
/// Truncated field at the shipped precision.
pub type TruncatedField64 = coeffs::TruncatedField<f64>;
/// Regularizing map at the shipped precision.
pub type ZvonkinMap64 = zvonkin::ZvonkinMap<f64>;
/// Transformed coefficient field at the shipped precision.
pub type TransformedField64 = zvonkin::TransformedField<f64>;
/// Simulated path batch at the shipped precision.
pub type PathBatch64 = sim::PathBatch<f64>;
/// Coupled two-point batch at the shipped precision.
pub type TwoPointBatch64 = sim::TwoPointBatch<f64>;
/// Bound-check report at the shipped precision.
pub type BoundReport64 = estimators::BoundReport<f64>;
