use nalgebra::{Matrix2, Matrix4, Vector2};

use crate::error::{Error, Result};

/// How the terminal cost is chosen. Only the Lyapunov weight of the LQR
/// closed loop is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TerminalMode {
    #[default]
    LyapunovWeight,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub opt_tol: f64,
    pub feas_tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { opt_tol: 1e-6, feas_tol: 1e-6, max_iter: 50 }
    }
}

/// Safety constraint placed on every predicted step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SafetyConstraint {
    /// `H(z[k+1]) >= (1 - gamma) H(z[k])`.
    Cbf {
        gamma: f64,
    },
    /// `H(z[k+1]) >= 0`, the Euclidean-distance baseline.
    Euclidean,
    None,
}

impl SafetyConstraint {
    /// Coefficient of `H(z[k])` in the row `decay H(z[k]) - H(z[k+1]) <= 0`.
    pub fn decay(&self) -> Option<f64> {
        match *self {
            SafetyConstraint::Cbf { gamma } => Some(1.0 - gamma),
            SafetyConstraint::Euclidean => Some(0.0),
            SafetyConstraint::None => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    /// Prediction horizon `N`.
    pub horizon: usize,
    /// Number of terminal-controller steps checked against the bounds, `N_c`.
    pub constraint_horizon: usize,
    pub gamma: f64,
    pub ts: f64,
    pub q: Matrix4<f64>,
    pub r: Matrix2<f64>,
    pub v_min: Vector2<f64>,
    pub v_max: Vector2<f64>,
    /// Lower bounds of `(z1, z3)`.
    pub position_min: Vector2<f64>,
    /// Upper bounds of `(z1, z3)`.
    pub position_max: Vector2<f64>,
    pub terminal: TerminalMode,
    pub solver: SolverOptions,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 8,
            constraint_horizon: 10,
            gamma: 0.1,
            ts: 0.05,
            q: Matrix4::identity(),
            r: Matrix2::identity() * 0.1,
            v_min: Vector2::new(-30.0, -30.0),
            v_max: Vector2::new(30.0, 30.0),
            position_min: Vector2::new(-10.0, -10.0),
            position_max: Vector2::new(10.0, 10.0),
            terminal: TerminalMode::LyapunovWeight,
            solver: SolverOptions::default(),
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("mpc.horizon", "must be at least 1"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("mpc.gamma", "must lie in (0, 1]"));
        }
        if !(self.ts.is_finite() && self.ts > 0.0) {
            return Err(Error::config("mpc.ts", "must be positive"));
        }
        for i in 0..2 {
            if !(self.v_min[i] < self.v_max[i]) {
                return Err(Error::config("mpc.v_min", "must be below mpc.v_max elementwise"));
            }
            if !(self.position_min[i] < self.position_max[i]) {
                return Err(Error::config("mpc.position_min", "must be below mpc.position_max elementwise"));
            }
        }
        if (self.q - self.q.transpose()).amax() > 1e-12 || self.q.symmetric_eigenvalues().min() < -1e-12 {
            return Err(Error::config("mpc.q", "must be symmetric positive semidefinite"));
        }
        if (self.r - self.r.transpose()).amax() > 1e-12 || self.r.cholesky().is_none() {
            return Err(Error::config("mpc.r", "must be symmetric positive definite"));
        }
        let s = &self.solver;
        if !(s.opt_tol > 0.0 && s.feas_tol > 0.0 && s.max_iter > 0) {
            return Err(Error::config("mpc.solver", "tolerances and iteration limit must be positive"));
        }
        Ok(())
    }
}
