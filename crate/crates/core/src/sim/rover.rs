//! Closed-loop ground robot: drive forward along a line, then reverse back,
//! with the safety filter querying an ESDF built from drifting odometry.

use nalgebra::{Matrix6, Vector3};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::camera::{raycast_depth, CameraModel};
use super::env::Environment;
use super::filter::{safety_filter, PlanarState, RobotCommand};
use super::{look_rotation, rng_stream, TruePose, STREAM_ODOMETRY};
use crate::esdf::{observe, CertifiedEsdfMap, EsdfPolicy, IntegrationParams, Query, Visibility};
use crate::liegroup::{exp_se3, psd_factor, sample_twist, Transform, UncertainTransform};

/// Mission and robot parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoverSpec {
    /// Start of the robot reference point `(x, y)` in meters and heading in
    /// degrees.
    pub start: [f64; 3],
    /// Distance driven forward before reversing.
    pub forward_distance: f64,
    /// Distance to reverse, measured back from the turnaround point.
    pub reverse_distance: f64,
    #[serde(default = "d_speed")]
    pub speed: f64,
    #[serde(default = "d_rate")]
    pub rate_hz: f64,
    #[serde(default = "d_height")]
    pub camera_height: f64,
    /// The camera sits this far behind the robot reference point.
    #[serde(default = "d_offset")]
    pub camera_offset: f64,
    /// A true position closer than this to an obstacle is an incursion.
    #[serde(default = "d_radius")]
    pub robot_radius: f64,
    #[serde(default = "d_lookahead")]
    pub lookahead: f64,
    #[serde(default = "d_horizon")]
    pub horizon: f64,
    #[serde(default = "d_dt")]
    pub dt: f64,
    #[serde(default = "d_max_frames")]
    pub max_frames: usize,
    #[serde(default = "d_max_angular")]
    pub max_angular: f64,
}

fn d_speed() -> f64 {
    0.3
}
fn d_rate() -> f64 {
    30.0
}
fn d_height() -> f64 {
    0.22
}
fn d_offset() -> f64 {
    0.15
}
fn d_radius() -> f64 {
    0.1
}
fn d_lookahead() -> f64 {
    0.3
}
fn d_horizon() -> f64 {
    0.5
}
fn d_dt() -> f64 {
    0.05
}
fn d_max_frames() -> usize {
    900
}
fn d_max_angular() -> f64 {
    1.0
}

/// What happened in one closed-loop run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoverOutcome {
    pub frames: usize,
    pub incursions: usize,
    pub first_incursion_frame: Option<usize>,
    /// Smallest true obstacle distance of the robot center minus its radius.
    pub min_clearance: f64,
    /// Whether the filter was holding the robot still when the run ended.
    pub halted: bool,
    pub filter_interventions: usize,
    pub reached_goal: bool,
    pub final_position: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    Forward,
    Reverse,
}

fn camera_pose(s: &PlanarState, spec: &RoverSpec) -> Transform<f64> {
    let (sn, cs) = s.theta.sin_cos();
    let off = spec.camera_offset;
    Transform::new(look_rotation(s.theta, 0.0), Vector3::new(s.x - off * cs, s.y - off * sn, spec.camera_height))
}

/// Robot reference pose read back from a camera pose.
fn planar(t: &Transform<f64>, spec: &RoverSpec) -> PlanarState {
    let z = t.rotation.matrix().column(2);
    let theta = z.y.atan2(z.x);
    let off = spec.camera_offset;
    PlanarState { x: t.translation.x + off * theta.cos(), y: t.translation.y + off * theta.sin(), theta }
}

/// Pure pursuit toward the point `lookahead` further along the line.
fn pursue(est: &PlanarState, origin: &[f64; 2], dir: &[f64; 2], progress_sign: f64, spec: &RoverSpec) -> RobotCommand {
    let rel = [est.x - origin[0], est.y - origin[1]];
    let along = rel[0] * dir[0] + rel[1] * dir[1];
    let target_s = along + progress_sign * spec.lookahead;
    let target = [origin[0] + dir[0] * target_s, origin[1] + dir[1] * target_s];
    // Reversing steers as if facing backwards.
    let heading = if progress_sign > 0.0 { est.theta } else { est.theta + std::f64::consts::PI };
    let dx = target[0] - est.x;
    let dy = target[1] - est.y;
    let alpha = dy.atan2(dx) - heading;
    let alpha = alpha.sin().atan2(alpha.cos());
    let l = (dx * dx + dy * dy).sqrt().max(1e-6);
    let omega = 2.0 * spec.speed * alpha.sin() / l;
    RobotCommand { linear: progress_sign * spec.speed, angular: omega }.clamped(spec.speed, spec.max_angular)
}

/// Runs the mission with an ESDF under `policy`. Noise is drawn from the
/// odometry stream of `seed`, one sample per frame, so policies share it.
#[allow(clippy::too_many_arguments)]
pub fn run_rover(
    env: &Environment,
    cam: &CameraModel,
    spec: &RoverSpec,
    policy: EsdfPolicy<f64>,
    sigma: &Matrix6<f64>,
    voxel_size: f64,
    params: &IntegrationParams,
    seed: u64,
) -> RoverOutcome {
    let mut rng: ChaCha8Rng = rng_stream(seed, STREAM_ODOMETRY);
    let factor = psd_factor(sigma);
    let theta0 = spec.start[2].to_radians();
    let dir = [theta0.cos(), theta0.sin()];
    let origin = [spec.start[0], spec.start[1]];
    let mut truth = PlanarState { x: origin[0], y: origin[1], theta: theta0 };
    let mut true_cam = camera_pose(&truth, spec);
    let mut est = true_cam;
    let mut map = CertifiedEsdfMap::new(voxel_size, env.bounds.min, policy);
    map.est_pose = est;

    let step_dt = 1.0 / spec.rate_hz;
    let mut phase = Phase::Forward;
    let mut out = RoverOutcome {
        frames: 0,
        incursions: 0,
        first_incursion_frame: None,
        min_clearance: f64::INFINITY,
        halted: false,
        filter_interventions: 0,
        reached_goal: false,
        final_position: [truth.x, truth.y, spec.camera_height],
    };
    let grid_origin = env.bounds.min;
    let integrate = |true_cam: &Transform<f64>, est: &Transform<f64>| {
        let frame = raycast_depth(env, &TruePose(*true_cam), cam);
        observe(voxel_size, &grid_origin, &frame.points, Visibility::Camera { camera: cam, frame: &frame }, est, params)
    };
    let obs = integrate(&true_cam, &est);
    map.apply_observation(&obs);

    for k in 1..=spec.max_frames {
        let est_planar = planar(&est, spec);
        let rel = [est_planar.x - origin[0], est_planar.y - origin[1]];
        let along = rel[0] * dir[0] + rel[1] * dir[1];
        if phase == Phase::Forward && along >= spec.forward_distance {
            phase = Phase::Reverse;
        }
        if phase == Phase::Reverse && along <= spec.forward_distance - spec.reverse_distance {
            out.reached_goal = true;
            break;
        }
        let sign = if phase == Phase::Forward { 1.0 } else { -1.0 };
        let cmd = pursue(&est_planar, &origin, &dir, sign, spec);
        let free = |s: &PlanarState| {
            // Rollout states are relative to the current pose: x forward, y left.
            let p_body = Vector3::new(-s.y, 0.0, s.x + spec.camera_offset);
            matches!(map.query_certified(&p_body), Query::Free(d) if d >= spec.robot_radius)
        };
        let filtered = safety_filter(cmd, free, PlanarState::default(), spec.horizon, spec.dt);
        if filtered != cmd {
            out.filter_interventions += 1;
        }
        out.halted = filtered.linear == 0.0 && cmd.linear != 0.0;

        let sub = (step_dt / spec.dt).ceil().max(1.0) as usize;
        for _ in 0..sub {
            truth = truth.advance(&filtered, step_dt / sub as f64);
        }
        let next_cam = camera_pose(&truth, spec);
        let true_inc = true_cam.inverse().compose(&next_cam);
        let est_inc = true_inc.compose(&exp_se3(&sample_twist(&factor, &mut rng)));
        est = est.compose(&est_inc);
        true_cam = next_cam;

        let obs = integrate(&true_cam, &est);
        map.step(&UncertainTransform::new(est_inc, *sigma), Some(&obs), &est);

        out.frames = k;
        let center = Vector3::new(truth.x, truth.y, spec.camera_height);
        let clearance = env.signed_distance(&center) - spec.robot_radius;
        out.min_clearance = out.min_clearance.min(clearance);
        out.final_position = center.into();
        if clearance < 0.0 {
            out.incursions += 1;
            out.first_incursion_frame.get_or_insert(k);
            break;
        }
    }
    out
}
