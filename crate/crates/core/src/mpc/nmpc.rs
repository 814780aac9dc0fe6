//! Nonlinear MPC baseline on the unicycle itself.
//!
//! Single shooting over the RK4-discretized unicycle: the dynamics are
//! eliminated by forward simulation and their sensitivities are propagated
//! alongside, so every SQP iteration re-linearizes the trajectory. The QP
//! Hessian is the Gauss-Newton approximation of the tracking cost. No
//! terminal set is imposed; only the terminal weight is used.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x2, Vector2, Vector3};

use super::config::{SafetyConstraint, SolverOptions};
use super::qp::{solve_qp, DenseQp, QpError};
use super::sqp::{SolveResult, SolveStatus};
use crate::model::{rk4_unicycle, RobotState, UnicycleInput};
use crate::safety::Obstacle;

#[derive(Debug, Clone, PartialEq)]
pub struct NmpcConfig {
    pub horizon: usize,
    pub ts: f64,
    /// Pose weight; the heading entry is normally zero.
    pub q: Matrix3<f64>,
    pub r: nalgebra::Matrix2<f64>,
    pub p: Matrix3<f64>,
    pub u_min: Vector2<f64>,
    pub u_max: Vector2<f64>,
    pub solver: SolverOptions,
}

impl NmpcConfig {
    /// Weights matching the linear scheme: position weight from `q`,
    /// terminal position weight from the Lyapunov weight `qbar`.
    pub fn matching(
        horizon: usize,
        ts: f64,
        q: &nalgebra::Matrix4<f64>,
        r: &nalgebra::Matrix2<f64>,
        qbar: &nalgebra::Matrix4<f64>,
    ) -> Self {
        Self {
            horizon,
            ts,
            q: Matrix3::from_diagonal(&Vector3::new(q[(0, 0)], q[(2, 2)], 0.0)),
            r: *r,
            p: Matrix3::from_diagonal(&Vector3::new(qbar[(0, 0)], qbar[(2, 2)], 0.0)),
            u_min: Vector2::new(-4.0, -4.0),
            u_max: Vector2::new(4.0, 4.0),
            solver: SolverOptions::default(),
        }
    }
}

fn step(x: &Vector3<f64>, u: &Vector2<f64>, ts: f64) -> Vector3<f64> {
    let next = rk4_unicycle(&RobotState::from_vector(x), &UnicycleInput { u1: u[0], u2: u[1] }, ts);
    next.to_vector()
}

fn step_jacobians(x: &Vector3<f64>, u: &Vector2<f64>, ts: f64) -> (Matrix3<f64>, Matrix3x2<f64>) {
    const H: f64 = 1e-6;
    let mut a = Matrix3::zeros();
    let mut b = Matrix3x2::zeros();
    for j in 0..3 {
        let mut hi = *x;
        let mut lo = *x;
        hi[j] += H;
        lo[j] -= H;
        a.set_column(j, &((step(&hi, u, ts) - step(&lo, u, ts)) / (2.0 * H)));
    }
    for j in 0..2 {
        let mut hi = *u;
        let mut lo = *u;
        hi[j] += H;
        lo[j] -= H;
        b.set_column(j, &((step(x, &hi, ts) - step(x, &lo, ts)) / (2.0 * H)));
    }
    (a, b)
}

struct Rollout {
    states: Vec<Vector3<f64>>,
    /// `d x[k] / d U`, 3 x 2N each.
    sens: Vec<DMatrix<f64>>,
}

fn rollout(x0: &Vector3<f64>, u: &DVector<f64>, cfg: &NmpcConfig, with_sens: bool) -> Rollout {
    let n = cfg.horizon;
    let mut states = Vec::with_capacity(n + 1);
    let mut sens = Vec::new();
    states.push(*x0);
    if with_sens {
        sens.push(DMatrix::zeros(3, 2 * n));
    }
    for k in 0..n {
        let uk = Vector2::new(u[2 * k], u[2 * k + 1]);
        let xk = states[k];
        states.push(step(&xk, &uk, cfg.ts));
        if with_sens {
            let (a, b) = step_jacobians(&xk, &uk, cfg.ts);
            let da = DMatrix::from_fn(3, 3, |i, j| a[(i, j)]);
            let mut s = da * &sens[k];
            for i in 0..3 {
                for j in 0..2 {
                    s[(i, 2 * k + j)] += b[(i, j)];
                }
            }
            sens.push(s);
        }
    }
    Rollout { states, sens }
}

fn cost(r: &Rollout, u: &DVector<f64>, goal: &Vector3<f64>, cfg: &NmpcConfig) -> f64 {
    let n = cfg.horizon;
    let mut j = 0.0;
    for k in 0..n {
        let e = r.states[k] - goal;
        let uk = Vector2::new(u[2 * k], u[2 * k + 1]);
        j += (e.transpose() * cfg.q * e)[0] + (uk.transpose() * cfg.r * uk)[0];
    }
    let e = r.states[n] - goal;
    j + (e.transpose() * cfg.p * e)[0]
}

/// Barrier rows `decay H(p[k]) - H(p[k+1]) <= 0`.
fn barrier_values(r: &Rollout, obstacles: &[Obstacle], decay: f64, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * obstacles.len());
    for k in 0..n {
        for o in obstacles {
            let h = |x: &Vector3<f64>| o.barrier_at(x[0], x[1]);
            out.push(decay * h(&r.states[k]) - h(&r.states[k + 1]));
        }
    }
    out
}

fn input_rows(n: usize, cfg: &NmpcConfig, u: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let mut a = DMatrix::zeros(4 * n, 2 * n);
    let mut b = DVector::zeros(4 * n);
    for k in 0..n {
        for i in 0..2 {
            let row = 4 * k + 2 * i;
            let idx = 2 * k + i;
            a[(row, idx)] = 1.0;
            b[row] = cfg.u_max[i] - u[idx];
            a[(row + 1, idx)] = -1.0;
            b[row + 1] = u[idx] - cfg.u_min[i];
        }
    }
    (a, b)
}

/// Solves the nonlinear problem from pose `x0` towards `goal` (position;
/// the heading entry is ignored through a zero weight).
pub fn solve_scnmpc(
    x0: &RobotState,
    goal: &Vector2<f64>,
    cfg: &NmpcConfig,
    safety: SafetyConstraint,
    obstacles: &[Obstacle],
    warm_start: Option<&DVector<f64>>,
) -> SolveResult {
    let started = Instant::now();
    let n = cfg.horizon;
    let nv = 2 * n;
    let x0v = x0.to_vector();
    let goal3 = Vector3::new(goal[0], goal[1], 0.0);
    let decay = safety.decay();
    let obs: &[Obstacle] = if decay.is_some() { obstacles } else { &[] };
    let decay = decay.unwrap_or(0.0);
    let opts = &cfg.solver;

    let mut u = warm_start.cloned().unwrap_or_else(|| DVector::zeros(nv));
    for k in 0..nv {
        let i = k % 2;
        u[k] = u[k].clamp(cfg.u_min[i], cfg.u_max[i]);
    }

    let violation = |r: &Rollout, u: &DVector<f64>| -> (f64, f64) {
        let q: Vec<f64> = barrier_values(r, obs, decay, n);
        let (_, b) = input_rows(n, cfg, u);
        let sum = q.iter().map(|c| c.max(0.0)).sum::<f64>() + b.iter().map(|s| (-s).max(0.0)).sum::<f64>();
        let max = q.iter().copied().chain(b.iter().map(|s| -s)).fold(0.0, f64::max);
        (sum, max)
    };

    let mut penalty: f64 = 1.0;
    let mut qp_total = 0;
    let mut iterations = 0;
    let mut status = SolveStatus::MaxIter;

    while iterations < opts.max_iter {
        iterations += 1;
        let r = rollout(&x0v, &u, cfg, true);
        let mut hessian = DMatrix::zeros(nv, nv);
        let mut gradient = DVector::zeros(nv);
        let dq = DMatrix::from_fn(3, 3, |i, j| cfg.q[(i, j)]);
        let dp = DMatrix::from_fn(3, 3, |i, j| cfg.p[(i, j)]);
        for k in 1..=n {
            let w = if k < n { &dq } else { &dp };
            let s = &r.sens[k];
            let e = r.states[k] - goal3;
            let e = DVector::from_column_slice(e.as_slice());
            hessian += s.transpose() * w * s * 2.0;
            gradient += s.transpose() * w * e * 2.0;
        }
        for k in 0..n {
            for i in 0..2 {
                for j in 0..2 {
                    hessian[(2 * k + i, 2 * k + j)] += 2.0 * cfg.r[(i, j)];
                }
                gradient[2 * k + i] += 2.0 * (cfg.r.row(i) * Vector2::new(u[2 * k], u[2 * k + 1]))[0];
            }
        }
        let hessian = (&hessian + hessian.transpose()) * 0.5;

        let (a_in, b_in) = input_rows(n, cfg, &u);
        let values = barrier_values(&r, obs, decay, n);
        let nq = values.len();
        let mut a = DMatrix::zeros(a_in.nrows() + nq, nv);
        let mut b = DVector::zeros(a_in.nrows() + nq);
        a.rows_mut(0, a_in.nrows()).copy_from(&a_in);
        b.rows_mut(0, a_in.nrows()).copy_from(&b_in);
        let mut row = a_in.nrows();
        for k in 0..n {
            for o in obs {
                let grad_h = |j: usize| -> DVector<f64> {
                    let x = r.states[j];
                    let s = &r.sens[j];
                    (s.row(0).transpose() * (2.0 * (x[0] - o.x_obs)))
                        + (s.row(1).transpose() * (2.0 * (x[1] - o.y_obs)))
                };
                let g = grad_h(k) * decay - grad_h(k + 1);
                a.row_mut(row).copy_from(&g.transpose());
                b[row] = -values[row - a_in.nrows()];
                row += 1;
            }
        }

        let qp = DenseQp { hessian, gradient: gradient.clone(), a, b };
        let sol = match solve_qp(&qp) {
            Ok(s) => s,
            Err(QpError::Infeasible { iterations: k, .. }) => {
                let mut out = SolveResult::infeasible(n, 3, started);
                out.sqp_iterations = iterations;
                out.qp_iterations_total = qp_total + k;
                return out;
            }
            Err(QpError::MaxIterations(k)) => {
                qp_total += k;
                break;
            }
            Err(QpError::NotPositiveDefinite) => break,
        };
        qp_total += sol.iterations;
        let d = sol.x;
        let needed = sol.multipliers.amax();
        if penalty < 1.5 * needed {
            penalty = 2.0 * needed + 1.0;
        }

        let (viol0, _) = violation(&r, &u);
        let phi0 = cost(&r, &u, &goal3, cfg) + penalty * viol0;
        let slope = gradient.dot(&d) - penalty * viol0;
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial = &u + &d * alpha;
            let rt = rollout(&x0v, &trial, cfg, false);
            let (vt, _) = violation(&rt, &trial);
            if cost(&rt, &trial, &goal3, cfg) + penalty * vt <= phi0 + 1e-4 * alpha * slope.min(0.0) {
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            alpha = 0.0;
        }
        u += &d * alpha;
        let rn = rollout(&x0v, &u, cfg, false);
        let (_, max_v) = violation(&rn, &u);
        if ((&d * alpha).amax() < opts.opt_tol || d.amax() < opts.opt_tol) && max_v < opts.feas_tol {
            status = SolveStatus::Optimal;
            break;
        }
        if !accepted {
            break;
        }
    }

    let r = rollout(&x0v, &u, cfg, false);
    let (_, max_violation) = violation(&r, &u);
    SolveResult {
        status,
        inputs: (0..n).map(|k| Vector2::new(u[2 * k], u[2 * k + 1])).collect(),
        predicted: r.states.iter().map(|x| DVector::from_column_slice(x.as_slice())).collect(),
        cost: cost(&r, &u, &goal3, cfg),
        sqp_iterations: iterations,
        qp_iterations_total: qp_total,
        solve_time: started.elapsed().as_secs_f64(),
        max_violation,
    }
}
