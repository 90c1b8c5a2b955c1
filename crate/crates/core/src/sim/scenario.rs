//! JSON scenario files: world, camera, trajectory, noise and run settings.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix6, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use super::camera::CameraModel;
use super::env::{Environment, Obstacle};
use super::rover::RoverSpec;
use super::trajectory::Waypoint;
use crate::esdf::IntegrationParams;
use crate::liegroup::chi2_quantile;
use crate::sfc::Aabb;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid scenario:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
    #[error("unknown preset '{0}' (available: room, corridor)")]
    UnknownPreset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A mapping pipeline paired with a carry-over policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Policy {
    BaselineSfc,
    HeuristicSfc,
    CertifiedSfc,
    BaselineEsdf,
    HeuristicEsdf,
    CertifiedEsdf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    Sfc,
    Esdf,
}

impl Policy {
    pub const ALL: [Policy; 6] = [
        Policy::BaselineSfc,
        Policy::HeuristicSfc,
        Policy::CertifiedSfc,
        Policy::BaselineEsdf,
        Policy::HeuristicEsdf,
        Policy::CertifiedEsdf,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Policy::BaselineSfc => "baseline_sfc",
            Policy::HeuristicSfc => "heuristic_sfc",
            Policy::CertifiedSfc => "certified_sfc",
            Policy::BaselineEsdf => "baseline_esdf",
            Policy::HeuristicEsdf => "heuristic_esdf",
            Policy::CertifiedEsdf => "certified_esdf",
        }
    }

    pub fn pipeline(&self) -> Pipeline {
        match self {
            Policy::BaselineSfc | Policy::HeuristicSfc | Policy::CertifiedSfc => Pipeline::Sfc,
            _ => Pipeline::Esdf,
        }
    }

    pub fn is_certified(&self) -> bool {
        matches!(self, Policy::CertifiedSfc | Policy::CertifiedEsdf)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown policy '{0}' (valid: baseline_sfc, heuristic_sfc, certified_sfc, baseline_esdf, heuristic_esdf, certified_esdf)")]
pub struct UnknownPolicy(pub String);

impl FromStr for Policy {
    type Err = UnknownPolicy;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Policy::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| UnknownPolicy(s.to_string()))
    }
}

impl Serialize for Policy {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Policy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Incremental odometry covariance: a scalar `s` (meaning `s * I`), six
/// diagonal entries, or the 21-entry row-major lower triangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SigmaSpec {
    Scalar(f64),
    Entries(Vec<f64>),
}

impl Default for SigmaSpec {
    fn default() -> Self {
        SigmaSpec::Scalar(0.0)
    }
}

impl SigmaSpec {
    pub fn matrix(&self) -> Result<Matrix6<f64>, String> {
        let m = match self {
            SigmaSpec::Scalar(s) => Matrix6::identity() * *s,
            SigmaSpec::Entries(v) if v.len() == 6 => Matrix6::from_diagonal(&nalgebra::Vector6::from_column_slice(v)),
            SigmaSpec::Entries(v) if v.len() == 21 => {
                let mut m = Matrix6::zeros();
                let mut k = 0;
                for i in 0..6 {
                    for j in 0..=i {
                        m[(i, j)] = v[k];
                        m[(j, i)] = v[k];
                        k += 1;
                    }
                }
                m
            }
            SigmaSpec::Entries(v) => return Err(format!("expected 6 or 21 entries, got {}", v.len())),
        };
        if m.iter().any(|x| !x.is_finite()) {
            return Err("entries must be finite".into());
        }
        let min_eig = m.symmetric_eigenvalues().min();
        if min_eig < -1e-12 * m.norm().max(1.0) {
            return Err(format!("not positive semidefinite (smallest eigenvalue {min_eig:e})"));
        }
        Ok(m)
    }
}

/// Truncation scale: a literal, or `"autoP"` for the chi-square (3 dof)
/// quantile at probability `0.P` (`"auto97"` is 0.97; `"auto0.99"` also parses).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KappaSpec {
    Literal(f64),
    Auto(f64),
}

impl Default for KappaSpec {
    fn default() -> Self {
        KappaSpec::Auto(0.97)
    }
}

impl KappaSpec {
    pub fn resolve(&self) -> Result<f64, String> {
        match *self {
            KappaSpec::Literal(k) if k.is_finite() && k >= 0.0 => Ok(k),
            KappaSpec::Literal(k) => Err(format!("kappa must be finite and non-negative, got {k}")),
            KappaSpec::Auto(p) => chi2_quantile(3, p).map_err(|e| e.to_string()),
        }
    }
}

impl FromStr for KappaSpec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if let Some(rest) = s.strip_prefix("auto") {
            let p = if rest.contains('.') {
                rest.parse::<f64>()
            } else {
                format!("0.{rest}").parse::<f64>()
            };
            return match p {
                Ok(p) if !rest.is_empty() && p > 0.0 && p < 1.0 => Ok(KappaSpec::Auto(p)),
                _ => Err(format!("bad kappa '{s}': expected autoP with P a probability, e.g. auto97")),
            };
        }
        s.parse::<f64>()
            .map(KappaSpec::Literal)
            .map_err(|_| format!("bad kappa '{s}': expected a number or autoP"))
    }
}

impl Serialize for KappaSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match *self {
            KappaSpec::Literal(k) => s.serialize_f64(k),
            KappaSpec::Auto(p) => s.serialize_str(&format!("auto{p}")),
        }
    }
}

impl<'de> Deserialize<'de> for KappaSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(k) => Ok(KappaSpec::Literal(k)),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

/// Centered pinhole camera with square pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
    pub min_range: f64,
    pub max_range: f64,
}

impl CameraSpec {
    pub fn model(&self) -> CameraModel {
        CameraModel::from_fov(self.width, self.height, self.hfov_deg, self.min_range, self.max_range)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub waypoints: Vec<Waypoint>,
    pub frames: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MappingSpec {
    pub voxel_size: f64,
    pub truncation: f64,
    pub clamp_to_view: bool,
    /// Frames a heuristic SFC keeps a polytope.
    pub heuristic_window: u64,
    /// Meters a heuristic ESDF keeps a voxel from the camera.
    pub heuristic_radius: f64,
    /// Pixel stride of the points handed to corridor generation.
    pub sfc_stride: usize,
    /// Corridor seed distance along the optical axis.
    pub sfc_seed_offset: f64,
    /// Obstacle points are pulled toward the corridor seed by this many
    /// angular pixel pitches, sealing the gaps between depth rays.
    pub sfc_pullback: f64,
}

impl Default for MappingSpec {
    fn default() -> Self {
        Self {
            voxel_size: 0.05,
            truncation: 0.5,
            clamp_to_view: false,
            heuristic_window: 60,
            heuristic_radius: 3.0,
            sfc_stride: 1,
            sfc_seed_offset: 0.0,
            sfc_pullback: 2.0,
        }
    }
}

impl MappingSpec {
    pub fn integration(&self) -> IntegrationParams {
        IntegrationParams { truncation: self.truncation, clamp_to_view: self.clamp_to_view }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    /// Metrics every this many frames; the last frame is always evaluated.
    pub every: usize,
    /// Lattice cell for corridor volume sampling.
    pub volume_cell: f64,
    /// Surface sample spacing; defaults to half a voxel.
    pub sample_spacing: Option<f64>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self { every: 10, volume_cell: 0.02, sample_spacing: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ViolationRatePct,
    MaxViolationMm,
    FreeVolumeM3,
}

/// Bound on a final-frame summary value, checked after a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Assertion {
    pub policy: Policy,
    pub metric: Metric,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub bounds: BoundsSpec,
    pub obstacles: Vec<Obstacle>,
    pub camera: CameraSpec,
    pub trajectory: TrajectorySpec,
    #[serde(default)]
    pub sigma: SigmaSpec,
    #[serde(default)]
    pub kappa: KappaSpec,
    #[serde(default)]
    pub seed: u64,
    pub policies: Vec<Policy>,
    #[serde(default)]
    pub mapping: MappingSpec,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub assertions: Vec<Assertion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rover: Option<RoverSpec>,
}

const ROOM: &str = include_str!("../../presets/room.json");
const CORRIDOR: &str = include_str!("../../presets/corridor.json");

impl Scenario {
    pub fn preset(name: &str) -> Result<Self, ScenarioError> {
        match name {
            "room" => Self::from_json(ROOM),
            "corridor" => Self::from_json(CORRIDOR),
            other => Err(ScenarioError::UnknownPreset(other.to_string())),
        }
    }

    /// Parses and validates.
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        s.validate()?;
        Ok(s)
    }

    /// Reads a file path, or a preset name when no such file exists.
    pub fn load(path_or_preset: &str) -> Result<Self, ScenarioError> {
        let path = std::path::Path::new(path_or_preset);
        if path.exists() {
            Self::from_json(&std::fs::read_to_string(path)?)
        } else {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or(path_or_preset);
            Self::preset(stem)
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut errs = Vec::new();
        let b = &self.bounds;
        if (0..3).any(|i| !(b.min[i] < b.max[i])) {
            errs.push("bounds: min must be below max on every axis".to_string());
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            match o {
                Obstacle::Box { min, max } if (0..3).any(|k| !(min[k] < max[k])) => {
                    errs.push(format!("obstacles[{i}]: box min must be below max"))
                }
                Obstacle::Plane { normal, .. } if Vector3::from(*normal).norm() < 1e-12 => {
                    errs.push(format!("obstacles[{i}]: plane normal must be nonzero"))
                }
                _ => {}
            }
        }
        if let Err(e) = self.camera.model().validate() {
            errs.push(format!("camera: {e}"));
        }
        if !(self.camera.hfov_deg > 0.0 && self.camera.hfov_deg < 180.0) {
            errs.push("camera.hfov_deg: must lie in (0, 180)".into());
        }
        if self.trajectory.waypoints.is_empty() {
            errs.push("trajectory.waypoints: need at least one waypoint".into());
        }
        if self.trajectory.frames == 0 {
            errs.push("trajectory.frames: must be positive".into());
        }
        if let Err(e) = self.sigma.matrix() {
            errs.push(format!("sigma: {e}"));
        }
        if let Err(e) = self.kappa.resolve() {
            errs.push(format!("kappa: {e}"));
        }
        if self.policies.is_empty() {
            errs.push("policies: need at least one policy".into());
        }
        let m = &self.mapping;
        if !(m.voxel_size > 0.0) {
            errs.push("mapping.voxel_size: must be positive".into());
        }
        if !(m.truncation > 0.0) {
            errs.push("mapping.truncation: must be positive".into());
        }
        if m.heuristic_window == 0 {
            errs.push("mapping.heuristic_window: must be positive".into());
        }
        if !(m.heuristic_radius > 0.0) {
            errs.push("mapping.heuristic_radius: must be positive".into());
        }
        if m.sfc_stride == 0 {
            errs.push("mapping.sfc_stride: must be positive".into());
        }
        if !(m.sfc_seed_offset >= 0.0 && m.sfc_seed_offset < self.camera.max_range) {
            errs.push("mapping.sfc_seed_offset: must lie in [0, camera.max_range)".into());
        }
        if !(m.sfc_pullback >= 0.0) {
            errs.push("mapping.sfc_pullback: must be non-negative".into());
        }
        if self.eval.every == 0 {
            errs.push("eval.every: must be positive".into());
        }
        if !(self.eval.volume_cell > 0.0) {
            errs.push("eval.volume_cell: must be positive".into());
        }
        if matches!(self.eval.sample_spacing, Some(s) if !(s > 0.0)) {
            errs.push("eval.sample_spacing: must be positive".into());
        }
        for (i, a) in self.assertions.iter().enumerate() {
            if a.min.is_none() && a.max.is_none() {
                errs.push(format!("assertions[{i}]: needs min or max"));
            }
            if !self.policies.contains(&a.policy) {
                errs.push(format!("assertions[{i}]: policy {} is not configured", a.policy));
            }
        }
        if let Some(r) = &self.rover {
            if !(r.speed > 0.0 && r.rate_hz > 0.0 && r.dt > 0.0 && r.horizon > 0.0 && r.lookahead > 0.0) {
                errs.push("rover: speed, rate_hz, dt, horizon and lookahead must be positive".into());
            }
            if !(r.forward_distance > 0.0 && r.reverse_distance > 0.0) {
                errs.push("rover: distances must be positive".into());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(errs))
        }
    }

    pub fn aabb(&self) -> Aabb<f64> {
        Aabb::new(Vector3::from(self.bounds.min), Vector3::from(self.bounds.max))
    }

    pub fn sample_spacing(&self) -> f64 {
        self.eval.sample_spacing.unwrap_or(self.mapping.voxel_size * 0.5)
    }

    pub fn environment(&self) -> Environment {
        Environment::new(self.obstacles.clone(), self.aabb(), self.sample_spacing())
    }

    /// Validated covariance.
    pub fn sigma_matrix(&self) -> Matrix6<f64> {
        self.sigma.matrix().expect("validated scenario")
    }

    pub fn kappa_value(&self) -> f64 {
        self.kappa.resolve().expect("validated scenario")
    }
}
