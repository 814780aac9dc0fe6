//! Discrete-time control barrier functions for circular obstacles.
//!
//! The barrier is the squared clearance `H(z) = |p - c|^2 - r^2` of the
//! position `p = (z1, z3)`. The discrete CBF condition used throughout is
//! `H(z[k+1]) >= (1 - gamma) H(z[k])`: with `gamma = 1` it reduces to the
//! plain state constraint `H >= 0`, and smaller `gamma` lets the barrier
//! decay more slowly.

use nalgebra::{Matrix2x4, Vector2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dfl::LinearState;
use crate::error::{Error, Result};
use crate::lti::LtiModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub x_obs: f64,
    pub y_obs: f64,
    pub r_obs: f64,
}

impl Obstacle {
    pub fn new(x_obs: f64, y_obs: f64, r_obs: f64) -> Result<Self> {
        let o = Self { x_obs, y_obs, r_obs };
        o.validate("obstacles")?;
        Ok(o)
    }

    pub fn validate(&self, key: &str) -> Result<()> {
        if !(self.x_obs.is_finite() && self.y_obs.is_finite()) {
            return Err(Error::config(format!("{key}.center"), "must be finite"));
        }
        if !(self.r_obs.is_finite() && self.r_obs > 0.0) {
            return Err(Error::config(format!("{key}.radius"), "must be positive"));
        }
        Ok(())
    }

    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(self.x_obs, self.y_obs)
    }

    /// Signed distance from a point to the obstacle boundary.
    pub fn distance(&self, x: f64, y: f64) -> f64 {
        (x - self.x_obs).hypot(y - self.y_obs) - self.r_obs
    }

    /// Barrier value at a position.
    pub fn barrier_at(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.x_obs, y - self.y_obs);
        dx * dx + dy * dy - self.r_obs * self.r_obs
    }

    /// Obstacle expressed relative to a new origin.
    pub fn shifted(&self, origin: Vector2<f64>) -> Self {
        Self { x_obs: self.x_obs - origin[0], y_obs: self.y_obs - origin[1], r_obs: self.r_obs }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CbfParams {
    pub gamma: f64,
}

impl CbfParams {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::config("mpc.gamma", "must lie in (0, 1]"));
        }
        Ok(Self { gamma })
    }
}

pub fn barrier(z: &LinearState, obs: &Obstacle) -> f64 {
    obs.barrier_at(z.z1, z.z3)
}

/// `H(z[k+1]) - (1 - gamma) H(z[k])`; the constraint holds when this is
/// nonnegative.
pub fn cbf_residual(z_k: &LinearState, z_k1: &LinearState, p: &CbfParams, obs: &Obstacle) -> f64 {
    decay_residual(z_k, z_k1, p.gamma, obs)
}

fn decay_residual(z_k: &LinearState, z_k1: &LinearState, gamma: f64, obs: &Obstacle) -> f64 {
    barrier(z_k1, obs) - (1.0 - gamma) * barrier(z_k, obs)
}

/// Per-step distance constraint of the Euclidean baseline.
pub fn euclidean_residual(z: &LinearState, obs: &Obstacle) -> f64 {
    barrier(z, obs)
}

/// Distance of a transition to the level set `H(z[k+1]) = (1 - gamma) H(z[k])`.
pub fn level_set_residual(z_k: &LinearState, z_k1: &LinearState, p: &CbfParams, obs: &Obstacle) -> f64 {
    decay_residual(z_k, z_k1, p.gamma, obs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TerminalSafetyReport {
    pub pass: bool,
    pub worst_margin: f64,
    pub samples: usize,
}

/// Checks `H((A + BK) z) > (1 - gamma) H(z)` at every sample and for every
/// obstacle.
pub fn terminal_safety_check(
    model: &LtiModel,
    k: &Matrix2x4<f64>,
    p: &CbfParams,
    obstacles: &[Obstacle],
    terminal_samples: &[LinearState],
) -> Result<TerminalSafetyReport> {
    if terminal_samples.is_empty() {
        return Err(Error::config("terminal_samples", "at least one sample is required"));
    }
    let acl = model.closed_loop(k);
    let mut worst = f64::INFINITY;
    for z in terminal_samples {
        let next = LinearState::from_vector(&(acl * z.to_vector()));
        for obs in obstacles {
            worst = worst.min(decay_residual(z, &next, p.gamma, obs));
        }
    }
    Ok(TerminalSafetyReport { pass: worst > 0.0, worst_margin: worst, samples: terminal_samples.len() })
}

/// Uniform samples of the box `|z1|, |z3| <= position_bound`,
/// `|z2|, |z4| <= velocity_bound`, keeping only those outside every obstacle.
pub fn sample_terminal_region<R: Rng>(
    position_bound: f64,
    velocity_bound: f64,
    obstacles: &[Obstacle],
    count: usize,
    rng: &mut R,
) -> Vec<LinearState> {
    let mut samples = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while samples.len() < count && attempts < 100 * count.max(1) {
        attempts += 1;
        let z = LinearState::new(
            rng.random_range(-position_bound..=position_bound),
            rng.random_range(-velocity_bound..=velocity_bound),
            rng.random_range(-position_bound..=position_bound),
            rng.random_range(-velocity_bound..=velocity_bound),
        );
        if obstacles.iter().all(|o| barrier(&z, o) >= 0.0) {
            samples.push(z);
        }
    }
    samples
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::{discretize_double_integrator, TerminalData};
    use nalgebra::{Matrix2, Matrix4};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn nominal_obstacle() -> Obstacle {
        Obstacle::new(3.5, 3.5, 1.5).unwrap()
    }

    fn at(x: f64, y: f64) -> LinearState {
        LinearState::new(x, 0.0, y, 0.0)
    }

    #[test]
    fn barrier_examples() {
        let o = nominal_obstacle();
        assert!((barrier(&at(7.0, 7.0), &o) - 22.25).abs() < 1e-12);
        assert!(barrier(&at(5.0, 3.5), &o).abs() < 1e-12);
        assert!((barrier(&at(3.5, 3.5), &o) + 2.25).abs() < 1e-12);
    }

    #[test]
    fn cbf_residual_examples() {
        let o = nominal_obstacle();
        let a = at(7.0, 7.0);
        let b = at(6.0, 4.2);
        let one = CbfParams::new(1.0).unwrap();
        assert_eq!(cbf_residual(&a, &b, &one, &o), barrier(&b, &o));
        // gamma = 0 is outside the admissible range but the residual itself is defined
        assert_eq!(decay_residual(&a, &a, 0.0, &o), 0.0);

        // H(z_k) = 22.25; H(z_k1) = 20 with the point (3.5 + sqrt(22.25), 3.5)
        let z_k1 = at(3.5 + 22.25f64.sqrt(), 3.5);
        assert!((barrier(&z_k1, &o) - 20.0).abs() < 1e-12);
        let p = CbfParams::new(0.1).unwrap();
        assert!((cbf_residual(&a, &z_k1, &p, &o) + 0.025).abs() < 1e-12);
        assert!((level_set_residual(&a, &z_k1, &p, &o) + 0.025).abs() < 1e-12);
        let boundary = at(5.0, 3.5);
        assert!(level_set_residual(&a, &boundary, &one, &o).abs() < 1e-12);
    }

    #[test]
    fn euclidean_residual_examples() {
        let o = nominal_obstacle();
        assert!((euclidean_residual(&at(3.5 + 3.0, 3.5), &o) - 3.0 * 2.25).abs() < 1e-12);
        assert!(euclidean_residual(&at(3.5, 2.0), &o).abs() < 1e-12);
        assert_eq!(euclidean_residual(&at(7.0, 7.0), &o), barrier(&at(7.0, 7.0), &o));
    }

    #[test]
    fn params_validated() {
        assert!(CbfParams::new(0.0).is_err());
        assert!(CbfParams::new(1.5).is_err());
        assert!(CbfParams::new(1.0).is_ok());
        assert!(Obstacle::new(0.0, 0.0, 0.0).is_err());
    }

    fn terminal() -> (LtiModel, TerminalData) {
        let m = discretize_double_integrator(0.05).unwrap();
        let t = TerminalData::lqr(&m, &Matrix4::identity(), &(Matrix2::identity() * 0.1)).unwrap();
        (m, t)
    }

    #[test]
    fn terminal_check_far_obstacle_passes() {
        let (m, t) = terminal();
        let far = Obstacle::new(1e4, -1e4, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples = sample_terminal_region(5.0, 2.0, &[far], 500, &mut rng);
        let report = terminal_safety_check(&m, &t.k, &CbfParams::new(0.1).unwrap(), &[far], &samples).unwrap();
        assert!(report.pass && report.worst_margin > 0.0);
    }

    #[test]
    fn terminal_check_boundary_sample_driving_inward_fails() {
        let (m, t) = terminal();
        let obs = Obstacle::new(1.0, 0.0, 0.5).unwrap();
        // on the right edge of the obstacle, moving left towards the origin
        let z = LinearState::new(1.5, -1.0, 0.0, 0.0);
        assert!(barrier(&z, &obs).abs() < 1e-12);
        let report = terminal_safety_check(&m, &t.k, &CbfParams::new(0.1).unwrap(), &[obs], &[z]).unwrap();
        assert!(!report.pass && report.worst_margin < 0.0);
    }

    #[test]
    fn terminal_check_nominal_region_passes() {
        let (m, t) = terminal();
        let obs = nominal_obstacle();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples = sample_terminal_region(1.0, 0.5, &[obs], 10_000, &mut rng);
        assert_eq!(samples.len(), 10_000);
        let report = terminal_safety_check(&m, &t.k, &CbfParams::new(0.1).unwrap(), &[obs], &samples).unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn terminal_check_requires_samples() {
        let (m, t) = terminal();
        assert!(terminal_safety_check(&m, &t.k, &CbfParams::new(0.1).unwrap(), &[nominal_obstacle()], &[]).is_err());
    }
}
