//! Synthetic worlds, depth rendering, noisy odometry and the safety filter.

pub mod camera;
pub mod env;
pub mod filter;
pub mod rover;
pub mod scenario;
pub mod trajectory;

pub use camera::{raycast_depth, CameraModel, DepthFrame};
pub use env::{Environment, Obstacle};
pub use filter::{safety_filter, PlanarState, RobotCommand};
pub use trajectory::{generate_trajectory, Trajectory, Waypoint};

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::liegroup::{Rotation, Transform};

/// Ground-truth pose, body to inertial frame. Only the simulator and the
/// evaluator handle these.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruePose(pub Transform<f64>);

/// Estimated pose, body to mapping frame. The only pose maps ever see.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstPose(pub Transform<f64>);

/// Camera orientation looking along `yaw` (about world z, from +x) and
/// `pitch` (positive looks up), with z forward, x right, y down.
pub fn look_rotation(yaw: f64, pitch: f64) -> Rotation<f64> {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let z = Vector3::new(cy * cp, sy * cp, sp);
    let x = Vector3::new(sy, -cy, 0.0);
    let y = z.cross(&x);
    Rotation::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z]))
}

/// Odometry noise.
pub const STREAM_ODOMETRY: u64 = 1;
/// Evaluation sampling (volume lattices and the like).
pub const STREAM_EVAL: u64 = 2;

/// Independent generator for one consumer of a run seed.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
