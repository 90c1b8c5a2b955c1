//! Certified obstacle maps under odometry drift.
//!
//! The geometric core (`liegroup`, `sfc`, `esdf`) is generic over the scalar
//! type; `sim` and `eval` run in `f64`.

pub mod esdf;
pub mod eval;
pub mod liegroup;
pub mod sfc;
pub mod sim;
pub mod scalar;

pub use scalar::Real;

pub type Transform64 = liegroup::Transform<f64>;
pub type Transform32 = liegroup::Transform<f32>;
pub type UncertainTransform64 = liegroup::UncertainTransform<f64>;
pub type UncertainTransform32 = liegroup::UncertainTransform<f32>;
pub type Polytope64 = sfc::Polytope<f64>;
pub type CorridorMap64 = sfc::CorridorMap<f64>;
pub type CertifiedEsdfMap64 = esdf::CertifiedEsdfMap<f64>;
