//! Ground-truth metrics, lockstep experiment runs, sweeps and report output.

use std::fmt::Write as _;

use nalgebra::{Matrix6, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::esdf::{observe, CertifiedEsdfMap, EsdfPolicy, Observation, Query, Visibility};
use crate::liegroup::{Transform, UncertainTransform};
use crate::sfc::{union_volume, CorridorIndex, CorridorMap, GenerationInput, SfcPolicy};
use crate::sim::rover::{run_rover, RoverOutcome};
use crate::sim::scenario::{Metric, Pipeline, Policy, Scenario, ScenarioError, SigmaSpec};
use crate::sim::trajectory::{generate_trajectory, TrajectoryError};
use crate::sim::{raycast_depth, Environment, EstPose, TruePose};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("no surface samples inside the scenario bounds")]
    NoSamples,
    #[error("scenario has no rover section")]
    NoRover,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub frame: usize,
    /// Fraction of surface samples inside the claimed free space.
    pub violation_rate: f64,
    /// Meters.
    pub max_violation: f64,
    /// Cubic meters.
    pub free_volume: f64,
    pub policy: Policy,
    pub pipeline: Pipeline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySeries {
    pub policy: Policy,
    pub samples: Vec<MetricSample>,
    /// Frames whose corridor could not be generated.
    #[serde(default)]
    pub generation_failures: usize,
}

/// Final-frame values in report units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy: Policy,
    pub violation_rate_pct: f64,
    pub max_violation_mm: f64,
    pub free_volume_m3: f64,
}

impl SummaryRow {
    pub fn value(&self, m: Metric) -> f64 {
        match m {
            Metric::ViolationRatePct => self.violation_rate_pct,
            Metric::MaxViolationMm => self.max_violation_mm,
            Metric::FreeVolumeM3 => self.free_volume_m3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub scenario: String,
    /// Resolved configuration; re-running it reproduces this report.
    pub config: Scenario,
    pub sigma: [[f64; 6]; 6],
    pub kappa: f64,
    pub seed: u64,
    /// Violation-rate denominator: every boundary sample inside the bounds.
    pub surface_samples: usize,
    pub series: Vec<PolicySeries>,
    pub summary: Vec<SummaryRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssertionFailure {
    pub policy: Policy,
    pub metric: Metric,
    pub value: f64,
    pub bound: String,
}

/// Violation rate and maximum violation depth of a corridor map.
///
/// Samples are moved into the body frame with the true pose; the corridor
/// itself lives in the estimated body frame, which is exactly how a planner
/// consumes it.
pub fn sfc_violations(map: &CorridorMap<f64>, index: &CorridorIndex, samples: &[Vector3<f64>], truth: &TruePose) -> (f64, f64) {
    let inv = truth.0.inverse();
    let (count, max) = samples
        .par_iter()
        .filter_map(|s| index.depth(map, &inv.act(s)))
        .fold(|| (0usize, 0.0f64), |(c, m), d| (c + 1, m.max(d)))
        .reduce(|| (0, 0.0), |a, b| (a.0 + b.0, a.1.max(b.1)));
    (count as f64 / samples.len().max(1) as f64, max)
}

/// Violation rate and maximum stored distance at violating voxels.
pub fn esdf_violations(map: &CertifiedEsdfMap<f64>, samples: &[Vector3<f64>], truth: &TruePose) -> (f64, f64) {
    let inv = truth.0.inverse();
    let (count, max) = samples
        .par_iter()
        .filter_map(|s| match map.query_certified(&inv.act(s)) {
            Query::Free(d) => Some(d),
            Query::Unknown => None,
        })
        .fold(|| (0usize, 0.0f64), |(c, m), d| (c + 1, m.max(d)))
        .reduce(|| (0, 0.0), |a, b| (a.0 + b.0, a.1.max(b.1)));
    (count as f64 / samples.len().max(1) as f64, max)
}

/// Violation rate for an arbitrary body-frame free predicate.
pub fn violation_rate(
    is_free: impl Fn(&Vector3<f64>) -> bool + Sync,
    samples: &[Vector3<f64>],
    truth: &TruePose,
) -> Result<f64, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::NoSamples);
    }
    let inv = truth.0.inverse();
    let n = samples.par_iter().filter(|s| is_free(&inv.act(s))).count();
    Ok(n as f64 / samples.len() as f64)
}

/// The map a policy maintains.
#[derive(Debug, Clone)]
pub enum PolicyMap {
    Sfc(CorridorMap<f64>),
    Esdf(CertifiedEsdfMap<f64>),
}

fn make_map(p: Policy, scn: &Scenario, kappa: f64) -> PolicyMap {
    let m = &scn.mapping;
    let sfc = |policy| PolicyMap::Sfc(CorridorMap::new(policy));
    let esdf = |policy| PolicyMap::Esdf(CertifiedEsdfMap::new(m.voxel_size, Vector3::from(scn.bounds.min), policy));
    match p {
        Policy::BaselineSfc => sfc(SfcPolicy::Baseline),
        Policy::HeuristicSfc => sfc(SfcPolicy::Heuristic { window: m.heuristic_window }),
        Policy::CertifiedSfc => sfc(SfcPolicy::Certified { kappa }),
        Policy::BaselineEsdf => esdf(EsdfPolicy::Baseline),
        Policy::HeuristicEsdf => esdf(EsdfPolicy::Heuristic { radius: m.heuristic_radius }),
        Policy::CertifiedEsdf => esdf(EsdfPolicy::Certified { kappa }),
    }
}

/// Per-frame hook: frame index, true pose, estimated pose and the maps.
pub type FrameHook<'a> = dyn FnMut(usize, &TruePose, &EstPose, &[(Policy, PolicyMap)]) + 'a;

/// Runs every configured policy in lockstep on identical inputs.
pub fn run_experiment(scn: &Scenario) -> Result<ExperimentReport, EvalError> {
    run_experiment_with(scn, None).map(|(r, _)| r)
}

/// As [`run_experiment`], also returning the final maps and calling `hook`
/// after every frame's update.
pub fn run_experiment_with(
    scn: &Scenario,
    mut hook: Option<&mut FrameHook<'_>>,
) -> Result<(ExperimentReport, Vec<(Policy, PolicyMap)>), EvalError> {
    scn.validate()?;
    let env = scn.environment();
    if env.surface_samples.is_empty() {
        return Err(EvalError::NoSamples);
    }
    let cam = scn.camera.model();
    let sigma = scn.sigma_matrix();
    let kappa = scn.kappa_value();
    let traj = generate_trajectory(Some(&env), &scn.trajectory.waypoints, scn.trajectory.frames, &sigma, scn.seed)?;
    let params = scn.mapping.integration();
    let vs = scn.mapping.voxel_size;
    let origin = Vector3::from(scn.bounds.min);
    let clip = cam.frustum_halfspaces();
    let view = cam.view_bounds();
    let seed_pt = Vector3::new(0.0, 0.0, scn.mapping.sfc_seed_offset);
    let shrink = (1.0 - scn.mapping.sfc_pullback / cam.fx.min(cam.fy)).max(0.0);

    let mut maps: Vec<(Policy, PolicyMap)> = scn.policies.iter().map(|&p| (p, make_map(p, scn, kappa))).collect();
    let mut series: Vec<PolicySeries> =
        scn.policies.iter().map(|&p| PolicySeries { policy: p, samples: Vec::new(), generation_failures: 0 }).collect();
    let need_esdf = scn.policies.iter().any(|p| p.pipeline() == Pipeline::Esdf);
    let last = traj.steps.len() - 1;

    for (k, step) in traj.steps.iter().enumerate() {
        let frame = raycast_depth(&env, &step.true_pose, &cam);
        let est = step.est_pose.0;
        let obs: Option<Observation<f64>> = need_esdf.then(|| {
            observe(vs, &origin, &frame.points, Visibility::Camera { camera: &cam, frame: &frame }, &est, &params)
        });
        let pts: Vec<_> =
            frame.dilated_points(&cam, scn.mapping.sfc_stride).iter().map(|q| seed_pt + (q - seed_pt) * shrink).collect();
        // The increment maps frame k to k-1; corridors need its inverse.
        let inc = if k == 0 { UncertainTransform::certain(Transform::identity()) } else { step.est_incremental };
        let inc_inv = inc.inverse();
        for ((_, map), ser) in maps.iter_mut().zip(series.iter_mut()) {
            match map {
                PolicyMap::Sfc(m) => {
                    let input = GenerationInput { seed: seed_pt, obstacles: &pts, bounds: view, clip: &clip };
                    if m.step(&inc_inv, Some(input), k as u64).is_err() {
                        ser.generation_failures += 1;
                    }
                }
                PolicyMap::Esdf(m) => m.step(&inc, obs.as_ref(), &est),
            }
        }
        if let Some(h) = hook.as_deref_mut() {
            h(k, &step.true_pose, &step.est_pose, &maps);
        }
        if k % scn.eval.every == 0 || k == last {
            for ((p, map), ser) in maps.iter().zip(series.iter_mut()) {
                let (rate, max, vol) = match map {
                    PolicyMap::Sfc(m) => {
                        let index = CorridorIndex::build(m, 0.25);
                        let (r, d) = sfc_violations(m, &index, &env.surface_samples, &step.true_pose);
                        (r, d, union_volume(m, scn.eval.volume_cell, scn.seed))
                    }
                    PolicyMap::Esdf(m) => {
                        let (r, d) = esdf_violations(m, &env.surface_samples, &step.true_pose);
                        (r, d, m.free_volume())
                    }
                };
                ser.samples.push(MetricSample {
                    frame: k,
                    violation_rate: rate,
                    max_violation: max,
                    free_volume: vol,
                    policy: *p,
                    pipeline: p.pipeline(),
                });
            }
        }
    }

    let summary = series
        .iter()
        .map(|s| {
            let m = s.samples.last().expect("final frame evaluated");
            SummaryRow {
                policy: s.policy,
                violation_rate_pct: m.violation_rate * 100.0,
                max_violation_mm: m.max_violation * 1000.0,
                free_volume_m3: m.free_volume,
            }
        })
        .collect();
    let report = ExperimentReport {
        scenario: scn.name.clone(),
        config: scn.clone(),
        sigma: matrix_rows(&sigma),
        kappa,
        seed: scn.seed,
        surface_samples: env.surface_samples.len(),
        series,
        summary,
    };
    Ok((report, maps))
}

fn matrix_rows(m: &Matrix6<f64>) -> [[f64; 6]; 6] {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

/// Checks the scenario's assertions against the report summary.
pub fn check_assertions(report: &ExperimentReport) -> Vec<AssertionFailure> {
    let mut out = Vec::new();
    for a in &report.config.assertions {
        let Some(row) = report.summary.iter().find(|r| r.policy == a.policy) else { continue };
        let v = row.value(a.metric);
        if let Some(lo) = a.min {
            if !(v >= lo) {
                out.push(AssertionFailure { policy: a.policy, metric: a.metric, value: v, bound: format!(">= {lo}") });
            }
        }
        if let Some(hi) = a.max {
            if !(v <= hi) {
                out.push(AssertionFailure { policy: a.policy, metric: a.metric, value: v, bound: format!("<= {hi}") });
            }
        }
    }
    out
}

pub const SUMMARY_HEADER: [&str; 4] = ["policy", "violation_rate_pct", "max_violation_mm", "free_volume_m3"];

/// Summary table, one row per policy.
pub fn summary_csv(report: &ExperimentReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SUMMARY_HEADER).expect("in-memory write");
    for r in &report.summary {
        w.write_record([r.policy.name().to_string(), fmt_f64(r.violation_rate_pct), fmt_f64(r.max_violation_mm), fmt_f64(r.free_volume_m3)])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

/// Parses a summary table back into rows.
pub fn parse_summary_csv(text: &str) -> Result<Vec<SummaryRow>, String> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| e.to_string())?;
    if header.iter().ne(SUMMARY_HEADER) {
        return Err(format!("unexpected header {header:?}"));
    }
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| e.to_string())?;
            let num = |i: usize| rec[i].parse::<f64>().map_err(|e| format!("column {}: {e}", SUMMARY_HEADER[i]));
            Ok(SummaryRow {
                policy: rec[0].parse().map_err(|e: crate::sim::scenario::UnknownPolicy| e.to_string())?,
                violation_rate_pct: num(1)?,
                max_violation_mm: num(2)?,
                free_volume_m3: num(3)?,
            })
        })
        .collect()
}

/// Per-frame series for one policy.
pub fn series_csv(series: &PolicySeries) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["frame", "violation_rate_pct", "max_violation_mm", "free_volume_m3"]).expect("in-memory write");
    for s in &series.samples {
        w.write_record([
            s.frame.to_string(),
            fmt_f64(s.violation_rate * 100.0),
            fmt_f64(s.max_violation * 1000.0),
            fmt_f64(s.free_volume),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

/// Shortest representation that parses back to the same value.
fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

pub fn report_json(report: &ExperimentReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

/// Plain-text summary table.
pub fn summary_table(report: &ExperimentReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<16} {:>12} {:>12} {:>12}", "policy", "viol. [%]", "max [mm]", "free [m3]");
    for r in &report.summary {
        let _ = writeln!(
            s,
            "{:<16} {:>12.4} {:>12.2} {:>12.4}",
            r.policy.name(),
            r.violation_rate_pct,
            r.max_violation_mm,
            r.free_volume_m3
        );
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma2: f64,
    pub policy: Policy,
    pub violation_rate_pct: f64,
    pub max_violation_mm: f64,
    pub free_volume_m3: f64,
}

/// Runs the scenario once per `sigma2` (as `sigma2 * I`) with its seed.
pub fn sweep(scn: &Scenario, sigma2: &[f64]) -> Result<Vec<SweepRow>, EvalError> {
    let mut rows = Vec::new();
    for &s2 in sigma2 {
        let mut s = scn.clone();
        s.sigma = SigmaSpec::Scalar(s2);
        let report = run_experiment(&s)?;
        rows.extend(report.summary.iter().map(|r| SweepRow {
            sigma2: s2,
            policy: r.policy,
            violation_rate_pct: r.violation_rate_pct,
            max_violation_mm: r.max_violation_mm,
            free_volume_m3: r.free_volume_m3,
        }));
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["sigma2", "policy", "violation_rate_pct", "max_violation_mm", "free_volume_m3"]).expect("in-memory write");
    for r in rows {
        w.write_record([
            fmt_f64(r.sigma2),
            r.policy.name().to_string(),
            fmt_f64(r.violation_rate_pct),
            fmt_f64(r.max_violation_mm),
            fmt_f64(r.free_volume_m3),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoverReport {
    pub scenario: String,
    pub seed: u64,
    pub baseline: RoverOutcome,
    pub certified: RoverOutcome,
}

/// Closed-loop rover runs with the baseline and certified ESDF.
pub fn run_rover_pair(scn: &Scenario) -> Result<RoverReport, EvalError> {
    scn.validate()?;
    let spec = scn.rover.ok_or(EvalError::NoRover)?;
    let env: Environment = scn.environment();
    let cam = scn.camera.model();
    let sigma = scn.sigma_matrix();
    let kappa = scn.kappa_value();
    let params = scn.mapping.integration();
    let run = |policy| run_rover(&env, &cam, &spec, policy, &sigma, scn.mapping.voxel_size, &params, scn.seed);
    Ok(RoverReport {
        scenario: scn.name.clone(),
        seed: scn.seed,
        baseline: run(EsdfPolicy::Baseline),
        certified: run(EsdfPolicy::Certified { kappa }),
    })
}
