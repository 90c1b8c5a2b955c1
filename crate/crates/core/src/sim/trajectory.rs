//! Waypoint interpolation and noisy odometry.

use nalgebra::{Matrix6, Vector3};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::env::Environment;
use super::{look_rotation, rng_stream, EstPose, TruePose, STREAM_ODOMETRY};
use crate::liegroup::{adjoint, cross_covariance_root, exp_so3, log_so3, psd_factor, sample_twist, exp_se3, Transform, UncertainTransform};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("need at least one waypoint")]
    NoWaypoints,
    #[error("frame {frame} at {position:?} is not in free space (clearance {clearance:.4} m)")]
    LeavesFreeSpace { frame: usize, position: [f64; 3], clearance: f64 },
}

/// Camera waypoint: position plus viewing direction in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub position: [f64; 3],
    #[serde(default)]
    pub yaw_deg: f64,
    #[serde(default)]
    pub pitch_deg: f64,
}

impl Waypoint {
    pub fn pose(&self) -> Transform<f64> {
        Transform::new(
            look_rotation(self.yaw_deg.to_radians(), self.pitch_deg.to_radians()),
            Vector3::from(self.position),
        )
    }
}

/// One frame of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub true_pose: TruePose,
    /// Estimated increment from this frame to the previous one (identity at
    /// frame 0), with the covariance it was sampled from.
    pub est_incremental: UncertainTransform<f64>,
    pub est_pose: EstPose,
}

/// A generated run with first-order drift bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    /// Covariance of `true_k = est_k * Exp(e_k)`.
    pub cumulative_covariance: Vec<Matrix6<f64>>,
    /// Scalar correlation between consecutive cumulative errors: the `rho`
    /// for which `rho * cross_covariance_root(S_{k-1}, S_k)` is the Frobenius
    /// projection of the true cross-covariance `S_{k-1} A^T` (zero at frame 0).
    pub correlation: Vec<f64>,
}

/// Rotation distance weight (m per rad) for constant-speed interpolation.
const ROT_WEIGHT: f64 = 0.3;

/// Poses at `frames` evenly spaced arc-length stations along the waypoints
/// (translation lerp, rotation slerp per segment).
pub fn interpolate(waypoints: &[Waypoint], frames: usize) -> Result<Vec<Transform<f64>>, TrajectoryError> {
    if waypoints.is_empty() {
        return Err(TrajectoryError::NoWaypoints);
    }
    let poses: Vec<_> = waypoints.iter().map(Waypoint::pose).collect();
    if poses.len() == 1 || frames <= 1 {
        return Ok(vec![poses[0]; frames]);
    }
    let seg_len: Vec<f64> = poses
        .windows(2)
        .map(|w| {
            let rel = w[0].rotation.inverse() * w[1].rotation;
            (w[1].translation - w[0].translation).norm() + ROT_WEIGHT * log_so3(&rel).norm()
        })
        .collect();
    let total: f64 = seg_len.iter().sum();
    let mut out = Vec::with_capacity(frames);
    for k in 0..frames {
        let s = total * k as f64 / (frames - 1) as f64;
        let mut acc = 0.0;
        let mut seg = seg_len.len() - 1;
        for (i, l) in seg_len.iter().enumerate() {
            if s <= acc + l || i == seg_len.len() - 1 {
                seg = i;
                break;
            }
            acc += l;
        }
        let f = if seg_len[seg] > 0.0 { ((s - acc) / seg_len[seg]).clamp(0.0, 1.0) } else { 1.0 };
        let (a, b) = (&poses[seg], &poses[seg + 1]);
        let rel = log_so3(&(a.rotation.inverse() * b.rotation));
        let rot = a.rotation * exp_so3(&(rel * f));
        out.push(Transform::new(rot, a.translation.lerp(&b.translation, f)));
    }
    Ok(out)
}

/// Builds true poses, noisy increments and the composed estimate.
///
/// `est_inc = true_inc * Exp(tau)`, `tau ~ N(0, sigma)`, drawn from the
/// odometry stream of `seed`. The estimate starts at the true first pose.
pub fn generate_trajectory(
    env: Option<&Environment>,
    waypoints: &[Waypoint],
    frames: usize,
    sigma: &Matrix6<f64>,
    seed: u64,
) -> Result<Trajectory, TrajectoryError> {
    let truth = interpolate(waypoints, frames)?;
    if let Some(env) = env {
        for (k, t) in truth.iter().enumerate() {
            let c = env.signed_distance(&t.translation);
            if c <= 0.0 {
                return Err(TrajectoryError::LeavesFreeSpace { frame: k, position: t.translation.into(), clearance: c });
            }
        }
    }
    Ok(from_true_poses(&truth, sigma, seed))
}

/// Noisy odometry along given true poses.
pub fn from_true_poses(truth: &[Transform<f64>], sigma: &Matrix6<f64>, seed: u64) -> Trajectory {
    let mut rng: ChaCha8Rng = rng_stream(seed, STREAM_ODOMETRY);
    let factor = psd_factor(sigma);
    let mut steps = Vec::with_capacity(truth.len());
    let mut cov = Vec::with_capacity(truth.len());
    let mut corr = Vec::with_capacity(truth.len());
    let mut est = match truth.first() {
        Some(t) => *t,
        None => return Trajectory { steps, cumulative_covariance: cov, correlation: corr },
    };
    let mut s_k = Matrix6::zeros();
    for (k, t) in truth.iter().enumerate() {
        let inc = if k == 0 {
            UncertainTransform::certain(Transform::identity())
        } else {
            let true_inc = truth[k - 1].inverse().compose(t);
            let tau = sample_twist(&factor, &mut rng);
            let est_inc = true_inc.compose(&exp_se3(&tau));
            est = est.compose(&est_inc);
            let a = adjoint(&est_inc.inverse());
            let next = a * s_k * a.transpose() + sigma;
            let next = (next + next.transpose()) * 0.5;
            corr.push(projected_correlation(&(s_k * a.transpose()), &s_k, &next));
            s_k = next;
            UncertainTransform::new(est_inc, *sigma)
        };
        if k == 0 {
            corr.push(0.0);
        }
        cov.push(s_k);
        steps.push(TrajectoryStep { true_pose: TruePose(*t), est_incremental: inc, est_pose: EstPose(est) });
    }
    Trajectory { steps, cumulative_covariance: cov, correlation: corr }
}

fn projected_correlation(cross: &Matrix6<f64>, s0: &Matrix6<f64>, s1: &Matrix6<f64>) -> f64 {
    let Ok(root) = cross_covariance_root(s0, s1) else { return 0.0 };
    let n = root.norm_squared();
    if n > 0.0 {
        (cross.dot(&root) / n).clamp(-1.0, 1.0)
    } else {
        0.0
    }
}

/// Absolute trajectory error (RMS position difference).
pub fn ate(traj: &Trajectory) -> f64 {
    let n = traj.steps.len().max(1) as f64;
    let s: f64 = traj
        .steps
        .iter()
        .map(|s| (s.true_pose.0.translation - s.est_pose.0.translation).norm_squared())
        .sum();
    (s / n).sqrt()
}

/// Length of the true path.
pub fn path_length(traj: &Trajectory) -> f64 {
    traj.steps.windows(2).map(|w| (w[1].true_pose.0.translation - w[0].true_pose.0.translation).norm()).sum()
}
