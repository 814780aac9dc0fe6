//! Dynamic feedback linearization of the extended unicycle.
//!
//! With the speed integrator `zeta` appended to the pose, the outputs
//! `(x1, x2)` both have relative degree two and the decoupling matrix
//!
//! ```text
//! A(x) = [ cos x3   -zeta sin x3 ]
//!        [ sin x3    zeta cos x3 ]
//! ```
//!
//! has determinant `zeta`. Inverting it turns the robot into two decoupled
//! double integrators in the coordinates `z = (x1, zeta cos x3, x2, zeta sin x3)`,
//! driven by the virtual accelerations `v = (v1, v2)`.

use nalgebra::{Matrix2, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ExtendedInput, ExtendedState};

/// Double-integrator coordinates: x position, x velocity, y position,
/// y velocity.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LinearState {
    pub z1: f64,
    pub z2: f64,
    pub z3: f64,
    pub z4: f64,
}

impl LinearState {
    pub fn new(z1: f64, z2: f64, z3: f64, z4: f64) -> Self {
        Self { z1, z2, z3, z4 }
    }

    pub fn to_vector(self) -> Vector4<f64> {
        Vector4::new(self.z1, self.z2, self.z3, self.z4)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.z1, self.z3)
    }

    pub fn velocity(&self) -> Vector2<f64> {
        Vector2::new(self.z2, self.z4)
    }

    pub fn speed(&self) -> f64 {
        self.z2.hypot(self.z4)
    }
}

/// Virtual accelerations along x and y in m/s^2.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VirtualInput {
    pub v1: f64,
    pub v2: f64,
}

impl VirtualInput {
    pub fn new(v1: f64, v2: f64) -> Self {
        Self { v1, v2 }
    }

    pub fn to_vector(self) -> Vector2<f64> {
        Vector2::new(self.v1, self.v2)
    }

    pub fn from_vector(v: &Vector2<f64>) -> Self {
        Self::new(v[0], v[1])
    }
}

/// Below `zeta_threshold` the yaw-rate command is zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DflGuard {
    pub zeta_threshold: f64,
}

impl DflGuard {
    pub fn new(zeta_threshold: f64) -> Result<Self> {
        if !(zeta_threshold.is_finite() && zeta_threshold > 0.0) {
            return Err(Error::config("dfl.zeta_threshold", "must be positive"));
        }
        Ok(Self { zeta_threshold })
    }
}

impl Default for DflGuard {
    fn default() -> Self {
        Self { zeta_threshold: 0.01 }
    }
}

/// Linearizing control law `U = A(x)^-1 v`, with the yaw-rate channel
/// switched off when `zeta <= zeta_threshold`.
pub fn dfl_control(s: &ExtendedState, v: &VirtualInput, g: &DflGuard) -> ExtendedInput {
    let (sin, cos) = s.x3.sin_cos();
    let u1 = v.v1 * cos + v.v2 * sin;
    let u2 = if s.zeta > g.zeta_threshold { (-v.v1 * sin + v.v2 * cos) / s.zeta } else { 0.0 };
    ExtendedInput::new(u1, u2)
}

pub fn map_x_to_z(s: &ExtendedState) -> LinearState {
    let (sin, cos) = s.x3.sin_cos();
    LinearState::new(s.x1, s.zeta * cos, s.x2, s.zeta * sin)
}

/// Returned by [`map_z_to_x`] when the velocity is too small to define a
/// heading. Position and speed are still known.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndeterminateHeading {
    pub x1: f64,
    pub x2: f64,
    pub zeta: f64,
}

impl IndeterminateHeading {
    /// Completes the state with a heading kept from earlier.
    pub fn with_heading(self, x3: f64) -> ExtendedState {
        ExtendedState::new(self.x1, self.x2, x3, self.zeta)
    }
}

/// Inverse coordinate map. The heading is `atan2(z4, z2)` and the speed
/// `hypot(z2, z4) >= 0`.
pub fn map_z_to_x(z: &LinearState, g: &DflGuard) -> std::result::Result<ExtendedState, IndeterminateHeading> {
    let zeta = z.speed();
    if zeta <= g.zeta_threshold {
        return Err(IndeterminateHeading { x1: z.z1, x2: z.z3, zeta });
    }
    Ok(ExtendedState::new(z.z1, z.z3, z.z4.atan2(z.z2), zeta))
}

/// Decoupling matrix of the extended system together with its determinant.
pub fn decoupling_matrix(s: &ExtendedState) -> (Matrix2<f64>, f64) {
    let (sin, cos) = s.x3.sin_cos();
    let m = Matrix2::new(cos, -s.zeta * sin, sin, s.zeta * cos);
    let det = m.determinant();
    (m, det)
}

/// `v = A(x) U`, the inverse of [`dfl_control`] away from the singularity.
pub fn input_map_v_from_u(s: &ExtendedState, u: &ExtendedInput) -> VirtualInput {
    let (a, _) = decoupling_matrix(s);
    VirtualInput::from_vector(&(a * Vector2::new(u.u1, u.u2)))
}

/// Lie derivatives of the two position outputs along the extended vector
/// fields, evaluated by central finite differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeDegreeReport {
    pub lg1_h1: f64,
    pub lg2_h1: f64,
    pub lg1_lf_h1: f64,
    pub lg2_lf_h1: f64,
    pub lg1_h2: f64,
    pub lg2_h2: f64,
    pub lg1_lf_h2: f64,
    pub lg2_lf_h2: f64,
    /// Largest deviation from the closed-form values
    /// `(0, 0, cos x3, -zeta sin x3, 0, 0, sin x3, zeta cos x3)`.
    pub max_deviation: f64,
}

impl RelativeDegreeReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_deviation <= tol
    }
}

const FD_STEP: f64 = 1e-5;

fn drift(x: &Vector4<f64>) -> Vector4<f64> {
    Vector4::new(x[3] * x[2].cos(), x[3] * x[2].sin(), 0.0, 0.0)
}

fn g1(_: &Vector4<f64>) -> Vector4<f64> {
    Vector4::new(0.0, 0.0, 0.0, 1.0)
}

fn g2(_: &Vector4<f64>) -> Vector4<f64> {
    Vector4::new(0.0, 0.0, 1.0, 0.0)
}

fn gradient(f: &dyn Fn(&Vector4<f64>) -> f64, x: &Vector4<f64>) -> Vector4<f64> {
    let mut grad = Vector4::zeros();
    for i in 0..4 {
        let mut hi = *x;
        let mut lo = *x;
        hi[i] += FD_STEP;
        lo[i] -= FD_STEP;
        grad[i] = (f(&hi) - f(&lo)) / (2.0 * FD_STEP);
    }
    grad
}

fn lie(h: &dyn Fn(&Vector4<f64>) -> f64, field: fn(&Vector4<f64>) -> Vector4<f64>, x: &Vector4<f64>) -> f64 {
    gradient(h, x).dot(&field(x))
}

pub fn verify_relative_degree(s: &ExtendedState) -> RelativeDegreeReport {
    let x = s.to_vector();
    let h1 = |x: &Vector4<f64>| x[0];
    let h2 = |x: &Vector4<f64>| x[1];
    let lf_h1 = |y: &Vector4<f64>| lie(&h1, drift, y);
    let lf_h2 = |y: &Vector4<f64>| lie(&h2, drift, y);

    let report = RelativeDegreeReport {
        lg1_h1: lie(&h1, g1, &x),
        lg2_h1: lie(&h1, g2, &x),
        lg1_lf_h1: lie(&lf_h1, g1, &x),
        lg2_lf_h1: lie(&lf_h1, g2, &x),
        lg1_h2: lie(&h2, g1, &x),
        lg2_h2: lie(&h2, g2, &x),
        lg1_lf_h2: lie(&lf_h2, g1, &x),
        lg2_lf_h2: lie(&lf_h2, g2, &x),
        max_deviation: 0.0,
    };
    let (sin, cos) = s.x3.sin_cos();
    let expected = [0.0, 0.0, cos, -s.zeta * sin, 0.0, 0.0, sin, s.zeta * cos];
    let measured = [
        report.lg1_h1,
        report.lg2_h1,
        report.lg1_lf_h1,
        report.lg2_lf_h1,
        report.lg1_h2,
        report.lg2_h2,
        report.lg1_lf_h2,
        report.lg2_lf_h2,
    ];
    let max_deviation = expected.iter().zip(measured).map(|(e, m)| (e - m).abs()).fold(0.0, f64::max);
    RelativeDegreeReport { max_deviation, ..report }
}
