//! Differential-drive kinematics.
//!
//! The robot is driven by two wheels of radius `r` separated by an axle of
//! length `d`. The wheel speeds map linearly onto the unicycle inputs
//! (linear speed, yaw rate) and the pose evolves according to the unicycle
//! model. The DFL controller adds one integrator on the linear speed, which
//! gives the four-dimensional [`ExtendedState`].

use nalgebra::{SVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wheel radius and axle length, both in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotParams {
    pub wheel_radius: f64,
    pub axle_length: f64,
}

impl RobotParams {
    pub fn new(wheel_radius: f64, axle_length: f64) -> Result<Self> {
        let p = Self { wheel_radius, axle_length };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.wheel_radius.is_finite() && self.wheel_radius > 0.0) {
            return Err(Error::config("robot.wheel_radius", "must be a positive finite number"));
        }
        if !(self.axle_length.is_finite() && self.axle_length > 0.0) {
            return Err(Error::config("robot.axle_length", "must be a positive finite number"));
        }
        Ok(())
    }

    /// Determinant of the wheel-to-unicycle transform, `-r^2 / d`.
    pub fn transform_determinant(&self) -> f64 {
        -self.wheel_radius * self.wheel_radius / self.axle_length
    }
}

impl Default for RobotParams {
    fn default() -> Self {
        Self { wheel_radius: 0.1, axle_length: 0.5 }
    }
}

/// Right and left wheel angular velocities in rad/s.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WheelSpeeds {
    pub omega_r: f64,
    pub omega_l: f64,
}

/// Linear speed `u1` (m/s) and yaw rate `u2` (rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UnicycleInput {
    pub u1: f64,
    pub u2: f64,
}

/// Planar pose. The heading `x3` is kept unwrapped.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RobotState {
    pub x1: f64,
    pub x2: f64,
    pub x3: f64,
}

impl RobotState {
    pub fn new(x1: f64, x2: f64, x3: f64) -> Self {
        Self { x1, x2, x3 }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x1, self.x2, self.x3)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

/// Pose plus the DFL integrator state `zeta`, the commanded linear speed.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ExtendedState {
    pub x1: f64,
    pub x2: f64,
    pub x3: f64,
    pub zeta: f64,
}

impl ExtendedState {
    pub fn new(x1: f64, x2: f64, x3: f64, zeta: f64) -> Self {
        Self { x1, x2, x3, zeta }
    }

    pub fn pose(&self) -> RobotState {
        RobotState::new(self.x1, self.x2, self.x3)
    }

    pub fn to_vector(self) -> Vector4<f64> {
        Vector4::new(self.x1, self.x2, self.x3, self.zeta)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|c| c.is_finite())
    }
}

/// Inputs of the extended model: `u1` is the linear acceleration and `u2`
/// the yaw rate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ExtendedInput {
    pub u1: f64,
    pub u2: f64,
}

impl ExtendedInput {
    pub fn new(u1: f64, u2: f64) -> Self {
        Self { u1, u2 }
    }
}

pub fn wheel_to_unicycle(w: WheelSpeeds, p: &RobotParams) -> UnicycleInput {
    let r = p.wheel_radius;
    UnicycleInput { u1: 0.5 * r * (w.omega_r + w.omega_l), u2: r / p.axle_length * (w.omega_r - w.omega_l) }
}

/// Inverse of [`wheel_to_unicycle`].
pub fn unicycle_to_wheel(u: UnicycleInput, p: &RobotParams) -> WheelSpeeds {
    let r = p.wheel_radius;
    // sum = 2 u1 / r, diff = d u2 / r
    let sum = 2.0 * u.u1 / r;
    let diff = p.axle_length * u.u2 / r;
    WheelSpeeds { omega_r: 0.5 * (sum + diff), omega_l: 0.5 * (sum - diff) }
}

pub fn unicycle_derivative(s: &RobotState, u: &UnicycleInput) -> Vector3<f64> {
    let (sin, cos) = s.x3.sin_cos();
    Vector3::new(u.u1 * cos, u.u1 * sin, u.u2)
}

pub fn extended_derivative(s: &ExtendedState, u: &ExtendedInput) -> Vector4<f64> {
    let (sin, cos) = s.x3.sin_cos();
    Vector4::new(s.zeta * cos, s.zeta * sin, u.u2, u.u1)
}

/// One classical fourth-order Runge-Kutta step of length `ts`.
///
/// The input is frozen inside `f`; for a feedback law evaluated at every
/// stage, close over the controller instead.
pub fn rk4_step<const N: usize, F>(f: F, state: &SVector<f64, N>, ts: f64) -> SVector<f64, N>
where
    F: Fn(&SVector<f64, N>) -> SVector<f64, N>,
{
    let k1 = f(state);
    let k2 = f(&(state + k1 * (0.5 * ts)));
    let k3 = f(&(state + k2 * (0.5 * ts)));
    let k4 = f(&(state + k3 * ts));
    state + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (ts / 6.0)
}

/// RK4 for the unicycle with a zero-order-held input.
pub fn rk4_unicycle(s: &RobotState, u: &UnicycleInput, ts: f64) -> RobotState {
    let next = rk4_step(|x| unicycle_derivative(&RobotState::from_vector(x), u), &s.to_vector(), ts);
    RobotState::from_vector(&next)
}

/// Slip velocity `xdot sin(x3) - ydot cos(x3)`; zero when the wheels roll
/// without slipping.
pub fn nonholonomic_residual(s: &RobotState, derivative: &Vector3<f64>) -> f64 {
    let (sin, cos) = s.x3.sin_cos();
    derivative[0] * sin - derivative[1] * cos
}
