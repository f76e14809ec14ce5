//! Tangent-distance registration and classification on transformation manifolds of
//! Gaussian-atom patterns.
//!
//! Patterns are finite sums of anisotropic Gaussian atoms, so smoothing, geometric
//! transformation and inner products are exact. Manifold geometry (tangents, metric,
//! curvature) comes from quadrature of analytic derivative fields. On top of that sit the
//! one-step and hierarchical tangent-distance estimators, the alignment and
//! misclassification bounds, and the experiment protocols driven by the CLI.

// Negated comparisons reject NaN along with out-of-range values; indexed loops mirror the
// component formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod atoms;
pub mod bounds;
pub mod classify;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod manifold;
pub mod raster;
pub mod register;
pub mod transforms;

pub use atoms::{
    appendix_rate_terms, atom_product_integral, derivative_norms, eval_gradient, eval_hessian, eval_pattern,
    pattern_inner_product, pattern_norm, smooth, smooth_pattern, Atom, AtomParams, FilterKernel, Pattern, RateTerms,
};
pub use bounds::{BoundInputs, EffectiveNoise};
pub use classify::{ClassBank, ClassStats};
pub use error::{Error, Result};
pub use manifold::{GeometryConstants, GridSpec, ManifoldGeometry, Metric, Projection};
pub use raster::{QuadratureSpec, RasterImage, Table};
pub use register::{FilterSchedule, RegistrationResult, ScheduleConfig};
pub use transforms::{calibrate_gains, ModelKind, ParamVector, TransformModel};
