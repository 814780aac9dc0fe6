//! Sequential quadratic programming for the barrier-constrained problem.
//!
//! Each major iteration linearizes the quadratic barrier rows about the
//! current input sequence, solves the resulting strictly convex QP for a
//! step, and backtracks on an exact-penalty merit function evaluated with
//! the original quadratic rows. The QP Hessian is the Lagrangian Hessian
//! whenever that is positive definite and the objective Hessian otherwise.
//! When a linearization has no feasible step, an elastic version of the QP
//! with penalized slacks is solved instead; the problem is declared
//! infeasible only if those steps stall with a violation left.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector2, Vector4};

use super::config::SolverOptions;
use super::qcqp::QcqpProblem;
use super::qp::{solve_elastic, solve_qp, DenseQp, QpError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub status: SolveStatus,
    /// Optimal input sequence, one entry per prediction step.
    pub inputs: Vec<Vector2<f64>>,
    /// Predicted states for steps `0..=N`.
    pub predicted: Vec<DVector<f64>>,
    pub cost: f64,
    pub sqp_iterations: usize,
    pub qp_iterations_total: usize,
    pub solve_time: f64,
    /// Largest constraint violation at the returned iterate.
    pub max_violation: f64,
}

impl SolveResult {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    /// Stacked inputs `(v0, v1, ...)`.
    pub fn stacked_inputs(&self) -> DVector<f64> {
        DVector::from_iterator(2 * self.inputs.len(), self.inputs.iter().flat_map(|v| [v[0], v[1]]))
    }

    pub(crate) fn infeasible(horizon: usize, state_dim: usize, started: Instant) -> Self {
        Self {
            status: SolveStatus::Infeasible,
            inputs: vec![Vector2::zeros(); horizon],
            predicted: vec![DVector::zeros(state_dim); horizon + 1],
            cost: f64::INFINITY,
            sqp_iterations: 0,
            qp_iterations_total: 0,
            solve_time: started.elapsed().as_secs_f64(),
            max_violation: f64::INFINITY,
        }
    }
}

fn unstack(v: &DVector<f64>) -> Vec<Vector2<f64>> {
    (0..v.len() / 2).map(|k| Vector2::new(v[2 * k], v[2 * k + 1])).collect()
}

const ARMIJO: f64 = 1e-4;
const ELASTIC_WEIGHT: f64 = 1e4;
const ELASTIC_REG: f64 = 1.0;

fn infeasible_result(horizon: usize, started: Instant, iterations: usize, qp_total: usize) -> SolveResult {
    let mut result = SolveResult::infeasible(horizon, 4, started);
    result.sqp_iterations = iterations;
    result.qp_iterations_total = qp_total;
    result
}
const MAX_BACKTRACKS: usize = 40;

/// Solves the problem from `warm_start`, or without one from several
/// starting points, keeping the best.
///
/// The barrier rows make the problem nonconvex: every obstacle splits the
/// feasible set into one branch per side. Cold starts therefore try zero
/// input, the unconstrained minimizer and a lateral push to either side of
/// each obstacle. `solve_time` covers all attempts; the iteration counts
/// are those of the returned one.
pub fn solve_sqp(problem: &QcqpProblem<'_>, warm_start: Option<&DVector<f64>>, opts: &SolverOptions) -> SolveResult {
    let started = Instant::now();
    if problem.infeasible_start {
        return SolveResult::infeasible(problem.horizon(), 4, started);
    }
    let mut result = match warm_start {
        Some(v) => solve_from(problem, v.clone(), opts, started),
        None => cold_starts(problem)
            .into_iter()
            .map(|v| solve_from(problem, v, opts, started))
            .min_by(|a, b| rank(a).cmp(&rank(b)).then(a.cost.total_cmp(&b.cost)))
            .expect("zero start is always present"),
    };
    result.solve_time = started.elapsed().as_secs_f64();
    result
}

fn rank(r: &SolveResult) -> u8 {
    match r.status {
        SolveStatus::Optimal => 0,
        SolveStatus::MaxIter => 1,
        SolveStatus::Infeasible => 2,
    }
}

fn cold_starts(problem: &QcqpProblem<'_>) -> Vec<DVector<f64>> {
    let c = problem.condensed;
    let nv = 2 * c.horizon;
    let clamp = |v: DVector<f64>| DVector::from_fn(nv, |i, _| v[i].clamp(c.v_min[i % 2], c.v_max[i % 2]));
    let mut starts = vec![DVector::zeros(nv)];
    if problem.barrier_rows.is_empty() {
        return starts;
    }
    if let Some(ch) = problem.hessian().clone().cholesky() {
        starts.push(clamp(ch.solve(&(-&problem.gradient))));
    }
    let p0 = Vector2::new(problem.z0[0], problem.z0[2]);
    let half = (c.v_max - c.v_min).amin() * 0.5;
    let mut seen = Vec::new();
    for row in &problem.barrier_rows {
        let d = row.obstacle.center() - p0;
        if d.norm() == 0.0 || seen.contains(&row.obstacle) {
            continue;
        }
        seen.push(row.obstacle);
        let lateral = Vector2::new(-d[1], d[0]) / d.norm();
        for side in [1.0, -1.0] {
            for scale in [0.25, 0.75] {
                let push = lateral * (side * scale * half);
                starts.push(clamp(DVector::from_fn(nv, |i, _| push[i % 2])));
            }
        }
    }
    starts
}

fn solve_from(problem: &QcqpProblem<'_>, mut v: DVector<f64>, opts: &SolverOptions, started: Instant) -> SolveResult {
    let n = problem.horizon();
    let nv = 2 * n;
    assert_eq!(v.len(), nv);

    let a_lin = problem.linear_a();
    let n_lin = a_lin.nrows();
    let n_quad = problem.barrier_rows.len();
    let mut a = DMatrix::zeros(n_lin + n_quad, nv);
    a.rows_mut(0, n_lin).copy_from(a_lin);

    let mut penalty: f64 = 1.0;
    let mut multipliers = DVector::<f64>::zeros(n_quad);
    let mut qp_total = 0usize;
    let mut status = SolveStatus::MaxIter;
    let mut iterations = 0usize;
    let mut relaxed = false;

    let merit = |v: &DVector<f64>, penalty: f64| -> f64 {
        let quad: f64 = problem.barrier_values(v).iter().map(|c| c.max(0.0)).sum();
        let lin: f64 = (&problem.linear_b - a_lin * v).iter().map(|s| (-s).max(0.0)).sum();
        problem.cost(v) + penalty * (quad + lin)
    };
    let total_violation = |v: &DVector<f64>| -> f64 {
        let quad: f64 = problem.barrier_values(v).iter().map(|c| c.max(0.0)).sum();
        let lin: f64 = (&problem.linear_b - a_lin * v).iter().map(|s| (-s).max(0.0)).sum();
        quad + lin
    };

    while iterations < opts.max_iter {
        iterations += 1;
        let values = problem.barrier_values(&v);
        let mut b = DVector::zeros(n_lin + n_quad);
        b.rows_mut(0, n_lin).copy_from(&(&problem.linear_b - a_lin * &v));
        for (j, row) in problem.barrier_rows.iter().enumerate() {
            let grad = problem.barrier_gradient(row, &v);
            a.row_mut(n_lin + j).copy_from(&grad.transpose());
            b[n_lin + j] = -values[j];
        }

        let mut hessian = problem.hessian().clone();
        if multipliers.iter().any(|&l| l > 0.0) {
            let mut lagrangian = hessian.clone();
            for (j, row) in problem.barrier_rows.iter().enumerate() {
                if multipliers[j] > 0.0 {
                    lagrangian += problem.barrier_hessian(row) * multipliers[j];
                }
            }
            if lagrangian.clone().cholesky().is_some() {
                hessian = lagrangian;
            }
        }
        let gradient = problem.hessian() * &v + &problem.gradient;
        let qp = DenseQp { hessian, gradient: gradient.clone(), a: a.clone(), b };

        let qres = solve_qp(&qp);
        let (step, new_multipliers, needed, elastic) = match qres {
            Ok(sol) => {
                qp_total += sol.iterations;
                let quad = sol.multipliers.rows(n_lin, n_quad).into_owned();
                let needed = sol.multipliers.amax();
                (sol.x, quad, needed, false)
            }
            Err(QpError::Infeasible { iterations: k, .. }) => {
                qp_total += k;
                // The linear rows are exact, so only the linearized barrier
                // rows get slack.
                let relaxable: Vec<usize> = (n_lin..n_lin + n_quad).collect();
                let eres = solve_elastic(&qp, &relaxable, ELASTIC_WEIGHT, ELASTIC_REG);
                match eres {
                    Ok(sol) => {
                        qp_total += sol.iterations;
                        let quad = sol.multipliers.rows(n_lin, n_quad).into_owned();
                        let needed = sol.multipliers.amax();
                        (sol.x, quad, needed, true)
                    }
                    Err(e) => {
                        if let QpError::Infeasible { iterations: k, .. } | QpError::MaxIterations(k) = e {
                            qp_total += k;
                        }
                        return infeasible_result(n, started, iterations, qp_total);
                    }
                }
            }
            Err(QpError::MaxIterations(k)) => {
                qp_total += k;
                break;
            }
            Err(QpError::NotPositiveDefinite) => break,
        };
        relaxed |= elastic;
        if penalty < 1.5 * needed {
            penalty = 2.0 * needed + 1.0;
        }

        let phi0 = merit(&v, penalty);
        let slope = gradient.dot(&step) - penalty * total_violation(&v);
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_BACKTRACKS {
            let trial = &v + &step * alpha;
            if merit(&trial, penalty) <= phi0 + ARMIJO * alpha * slope.min(0.0) {
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            alpha = 0.0;
        }
        v += &step * alpha;
        multipliers = new_multipliers;

        let step_norm = (&step * alpha).amax();
        let full_step_norm = step.amax();
        if (step_norm < opts.opt_tol || full_step_norm < opts.opt_tol) && problem.max_violation(&v) < opts.feas_tol {
            status = SolveStatus::Optimal;
            break;
        }
        if !accepted || (elastic && full_step_norm < opts.opt_tol) {
            break;
        }
    }

    // the relaxation was needed and could not restore feasibility
    if relaxed && problem.max_violation(&v) >= opts.feas_tol {
        return infeasible_result(n, started, iterations, qp_total);
    }

    let predicted =
        problem.states(&v).into_iter().map(|z: Vector4<f64>| DVector::from_column_slice(z.as_slice())).collect();
    SolveResult {
        status,
        inputs: unstack(&v),
        predicted,
        cost: problem.cost(&v),
        sqp_iterations: iterations,
        qp_iterations_total: qp_total,
        solve_time: started.elapsed().as_secs_f64(),
        max_violation: problem.max_violation(&v),
    }
}
