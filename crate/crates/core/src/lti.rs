//! Discrete prediction model and terminal ingredients.
//!
//! Under the linearizing feedback the robot is a pair of double integrators,
//! so the zero-order-hold discretization is available in closed form. The
//! terminal gain is the infinite-horizon LQR gain and the terminal weight
//! solves the discrete Lyapunov equation of the resulting closed loop, which
//! makes `z' Qbar z` the exact cost-to-go of the terminal controller.

use nalgebra::{DMatrix, Matrix2, Matrix2x4, Matrix4, Matrix4x2};

use crate::error::{Error, Result};

const RICCATI_TOL: f64 = 1e-12;
const RICCATI_MAX_ITER: usize = 10_000;
const LYAPUNOV_MAX_DOUBLINGS: usize = 64;

/// `z[k+1] = a z[k] + b v[k]` for the state ordering `(x, vx, y, vy)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LtiModel {
    pub a: Matrix4<f64>,
    pub b: Matrix4x2<f64>,
    pub ts: f64,
}

impl LtiModel {
    pub fn step(&self, z: &nalgebra::Vector4<f64>, v: &nalgebra::Vector2<f64>) -> nalgebra::Vector4<f64> {
        self.a * z + self.b * v
    }

    /// `a + b k`.
    pub fn closed_loop(&self, k: &Matrix2x4<f64>) -> Matrix4<f64> {
        self.a + self.b * k
    }
}

/// Terminal controller `v = k z` (sign included in `k`) and its cost-to-go.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerminalData {
    pub k: Matrix2x4<f64>,
    pub qbar: Matrix4<f64>,
    pub spectral_radius: f64,
}

impl TerminalData {
    /// LQR gain and matching Lyapunov terminal weight for `(q, r)`.
    pub fn lqr(model: &LtiModel, q: &Matrix4<f64>, r: &Matrix2<f64>) -> Result<Self> {
        let k = dlqr_gain(model, q, r)?;
        let qbar = terminal_weight(model, &k, q, r)?;
        let spectral_radius = spectral_radius(&DMatrix::from_fn(4, 4, |i, j| model.closed_loop(&k)[(i, j)]));
        Ok(Self { k, qbar, spectral_radius })
    }
}

pub fn discretize_double_integrator(ts: f64) -> Result<LtiModel> {
    if !(ts.is_finite() && ts > 0.0) {
        return Err(Error::config("mpc.ts", "sampling time must be positive"));
    }
    let mut a = Matrix4::identity();
    let mut b = Matrix4x2::zeros();
    for axis in 0..2 {
        let p = 2 * axis;
        a[(p, p + 1)] = ts;
        b[(p, axis)] = 0.5 * ts * ts;
        b[(p + 1, axis)] = ts;
    }
    Ok(LtiModel { a, b, ts })
}

/// One Riccati recursion `Q + A'PA - A'PB (R + B'PB)^-1 B'PA`.
pub fn riccati_map(model: &LtiModel, p: &Matrix4<f64>, q: &Matrix4<f64>, r: &Matrix2<f64>) -> Result<Matrix4<f64>> {
    let (a, b) = (&model.a, &model.b);
    let s = r + b.transpose() * p * b;
    let s_inv = s.cholesky().ok_or(Error::NotPositiveDefinite("R + B'PB"))?.inverse();
    let bpa = b.transpose() * p * a;
    Ok(q + a.transpose() * p * a - bpa.transpose() * s_inv * bpa)
}

/// Fixed point of the Riccati recursion, iterated from `P = Q`.
pub fn riccati_solution(model: &LtiModel, q: &Matrix4<f64>, r: &Matrix2<f64>) -> Result<Matrix4<f64>> {
    validate_weights(q, r)?;
    let mut p = *q;
    for _ in 0..RICCATI_MAX_ITER {
        let next = riccati_map(model, &p, q, r)?;
        let next = 0.5 * (next + next.transpose());
        let delta = (next - p).amax();
        p = next;
        if delta <= RICCATI_TOL {
            return Ok(p);
        }
    }
    Err(Error::NotConverged { what: "Riccati recursion", iterations: RICCATI_MAX_ITER })
}

/// Infinite-horizon discrete LQR gain. The closed loop is `A + B K`.
pub fn dlqr_gain(model: &LtiModel, q: &Matrix4<f64>, r: &Matrix2<f64>) -> Result<Matrix2x4<f64>> {
    let p = riccati_solution(model, q, r)?;
    Ok(gain_from_cost(model, &p, r))
}

fn gain_from_cost(model: &LtiModel, p: &Matrix4<f64>, r: &Matrix2<f64>) -> Matrix2x4<f64> {
    let (a, b) = (&model.a, &model.b);
    let s = r + b.transpose() * p * b;
    let sol = s.lu().solve(&(b.transpose() * p * a)).expect("R + B'PB is positive definite");
    -sol
}

/// Solves `Qbar - Acl' Qbar Acl = Q + K'RK` by doubling, `Acl = A + BK`.
pub fn terminal_weight(
    model: &LtiModel,
    k: &Matrix2x4<f64>,
    q: &Matrix4<f64>,
    r: &Matrix2<f64>,
) -> Result<Matrix4<f64>> {
    let acl = model.closed_loop(k);
    let rho = spectral_radius(&DMatrix::from_fn(4, 4, |i, j| acl[(i, j)]));
    if rho >= 1.0 {
        return Err(Error::NotStabilizing { spectral_radius: rho });
    }
    let stage = q + k.transpose() * r * k;
    // X_{j+1} = X_j + M_j' X_j M_j, M_{j+1} = M_j^2 sums the series
    // sum_i (Acl')^i stage Acl^i over 2^j terms.
    let mut x = stage;
    let mut m = acl;
    for _ in 0..LYAPUNOV_MAX_DOUBLINGS {
        let increment = m.transpose() * x * m;
        x += increment;
        m = m * m;
        if increment.amax() <= f64::EPSILON * x.amax() {
            let x = 0.5 * (x + x.transpose());
            return Ok(x);
        }
    }
    Err(Error::NotConverged { what: "Lyapunov doubling", iterations: LYAPUNOV_MAX_DOUBLINGS })
}

/// `max |Qbar - Acl' Qbar Acl - (Q + K'RK)|`.
pub fn lyapunov_residual(
    model: &LtiModel,
    k: &Matrix2x4<f64>,
    q: &Matrix4<f64>,
    r: &Matrix2<f64>,
    qbar: &Matrix4<f64>,
) -> f64 {
    let acl = model.closed_loop(k);
    (qbar - acl.transpose() * qbar * acl - (q + k.transpose() * r * k)).amax()
}

/// `max |P - riccati_map(P)|`.
pub fn riccati_residual(model: &LtiModel, p: &Matrix4<f64>, q: &Matrix4<f64>, r: &Matrix2<f64>) -> f64 {
    match riccati_map(model, p, q, r) {
        Ok(next) => (p - next).amax(),
        Err(_) => f64::INFINITY,
    }
}

/// Largest eigenvalue modulus, from the real Schur form.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    assert!(m.is_square(), "spectral radius needs a square matrix");
    if m.nrows() == 0 {
        return 0.0;
    }
    m.clone().complex_eigenvalues().iter().map(|l| l.norm()).fold(0.0, f64::max)
}

fn validate_weights(q: &Matrix4<f64>, r: &Matrix2<f64>) -> Result<()> {
    if (q - q.transpose()).amax() > 1e-12 || q.symmetric_eigenvalues().min() < -1e-12 {
        return Err(Error::config("mpc.q", "state weight must be symmetric positive semidefinite"));
    }
    if (r - r.transpose()).amax() > 1e-12 || r.cholesky().is_none() {
        return Err(Error::config("mpc.r", "input weight must be symmetric positive definite"));
    }
    Ok(())
}
