//! Forward-rollout safety filter for a unicycle robot.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotCommand {
    /// m/s
    pub linear: f64,
    /// rad/s
    pub angular: f64,
}

impl RobotCommand {
    pub fn clamped(self, max_linear: f64, max_angular: f64) -> Self {
        Self {
            linear: self.linear.clamp(-max_linear, max_linear),
            angular: self.angular.clamp(-max_angular, max_angular),
        }
    }
}

/// Planar pose `(x, y, theta)`; `x` forward, `y` left.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlanarState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl PlanarState {
    /// Euler step of the unicycle model.
    pub fn advance(&self, cmd: &RobotCommand, dt: f64) -> Self {
        Self {
            x: self.x + cmd.linear * self.theta.cos() * dt,
            y: self.y + cmd.linear * self.theta.sin() * dt,
            theta: self.theta + cmd.angular * dt,
        }
    }
}

/// Angular speed factor applied when a command is rejected.
pub const ANGULAR_REDUCTION: f64 = 0.5;

/// Rolls `cmd` forward from `state` for `horizon` seconds and passes it
/// through only if every sample (including the start) satisfies `is_free`.
/// Otherwise the linear command is zeroed and the angular one reduced.
pub fn safety_filter(
    cmd: RobotCommand,
    is_free: impl Fn(&PlanarState) -> bool,
    state: PlanarState,
    horizon: f64,
    dt: f64,
) -> RobotCommand {
    let steps = (horizon / dt).ceil().max(1.0) as usize;
    let mut s = state;
    let mut ok = is_free(&s);
    for _ in 0..steps {
        if !ok {
            break;
        }
        s = s.advance(&cmd, dt);
        ok = is_free(&s);
    }
    if ok {
        cmd
    } else {
        RobotCommand { linear: 0.0, angular: cmd.angular * ANGULAR_REDUCTION }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let cmd = RobotCommand { linear: 1.0, angular: 0.4 };
        assert_eq!(safety_filter(cmd, |_| true, PlanarState::default(), 0.5, 0.05), cmd);
        let stop = RobotCommand { linear: 0.0, angular: 0.2 };
        assert_eq!(safety_filter(cmd, |_| false, PlanarState::default(), 0.5, 0.05), stop);
        let straight = RobotCommand { linear: 1.0, angular: 0.0 };
        let wall = |s: &PlanarState| s.x < 0.3;
        assert_eq!(safety_filter(straight, wall, PlanarState::default(), 0.5, 0.05).linear, 0.0);
        let slow = RobotCommand { linear: 0.5, angular: 0.0 };
        assert_eq!(safety_filter(slow, wall, PlanarState::default(), 0.5, 0.05), slow);
    }
}
