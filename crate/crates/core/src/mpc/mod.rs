//! Finite-horizon optimal control on the linearized model.

pub mod config;
pub mod flops;
pub mod nmpc;
pub mod qcqp;
pub mod qp;
pub mod sqp;

use std::time::Instant;

use nalgebra::{DVector, Vector2, Vector4};

pub use config::{MpcConfig, SafetyConstraint, SolverOptions, TerminalMode};
pub use flops::{estimate_flops_ip, estimate_flops_sqp};
pub use nmpc::{solve_scnmpc, NmpcConfig};
pub use qcqp::{build_qcqp, BarrierRow, CondensedModel, QcqpProblem, RowCounts};
pub use qp::{kkt_residuals, solve_qp, DenseQp, KktResiduals, QpError, QpSolution};
pub use sqp::{solve_sqp, SolveResult, SolveStatus};

use crate::dfl::{LinearState, VirtualInput};
use crate::error::Result;
use crate::lti::{discretize_double_integrator, LtiModel, TerminalData};
use crate::safety::Obstacle;

/// Outcome of one receding-horizon step.
#[derive(Debug, Clone)]
pub struct ControlStep {
    pub result: SolveResult,
    /// First input of the optimal sequence.
    pub input: VirtualInput,
    /// Decay parameter actually used; differs from the configured one
    /// after a relaxation retry.
    pub gamma_used: Option<f64>,
    pub retried: bool,
}

/// Receding-horizon controller for a fixed goal and obstacle set.
///
/// Internally everything is expressed relative to the goal, so the
/// regulation problem is solved towards the origin.
#[derive(Debug, Clone)]
pub struct MpcController {
    cfg: MpcConfig,
    model: LtiModel,
    terminal: TerminalData,
    condensed: CondensedModel,
    goal: Vector2<f64>,
    obstacles: Vec<Obstacle>,
    safety: SafetyConstraint,
    warm: Option<DVector<f64>>,
    pub warm_start: bool,
}

impl MpcController {
    pub fn new(cfg: &MpcConfig, goal: Vector2<f64>, obstacles: &[Obstacle], safety: SafetyConstraint) -> Result<Self> {
        cfg.validate()?;
        let model = discretize_double_integrator(cfg.ts)?;
        let terminal = TerminalData::lqr(&model, &cfg.q, &cfg.r)?;
        let shifted =
            MpcConfig { position_min: cfg.position_min - goal, position_max: cfg.position_max - goal, ..cfg.clone() };
        let condensed = CondensedModel::new(&shifted, &model, &terminal);
        Ok(Self {
            cfg: cfg.clone(),
            model,
            terminal,
            condensed,
            goal,
            obstacles: obstacles.iter().map(|o| o.shifted(goal)).collect(),
            safety,
            warm: None,
            warm_start: true,
        })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    pub fn model(&self) -> &LtiModel {
        &self.model
    }

    pub fn terminal(&self) -> &TerminalData {
        &self.terminal
    }

    pub fn condensed(&self) -> &CondensedModel {
        &self.condensed
    }

    /// State relative to the goal.
    pub fn relative(&self, z: &LinearState) -> Vector4<f64> {
        z.to_vector() - Vector4::new(self.goal[0], 0.0, self.goal[1], 0.0)
    }

    /// Problem for state `z` (absolute coordinates).
    pub fn problem(&self, z: &LinearState, safety: SafetyConstraint) -> QcqpProblem<'_> {
        build_qcqp(&self.relative(z), &self.condensed, safety, &self.obstacles)
    }

    pub fn reset(&mut self) {
        self.warm = None;
    }

    pub fn step(&mut self, z: &LinearState) -> ControlStep {
        let started = Instant::now();
        let warm = if self.warm_start { self.warm.clone() } else { None };
        let problem = self.problem(z, self.safety);
        let mut result = solve_sqp(&problem, warm.as_ref(), &self.cfg.solver);
        let mut gamma_used = match self.safety {
            SafetyConstraint::Cbf { gamma } => Some(gamma),
            SafetyConstraint::Euclidean => Some(1.0),
            SafetyConstraint::None => None,
        };
        let mut retried = false;
        if result.status == SolveStatus::Infeasible && !problem.infeasible_start {
            if let SafetyConstraint::Cbf { gamma } = self.safety {
                if gamma < 1.0 {
                    let relaxed = (2.0 * gamma).min(1.0);
                    let problem = self.problem(z, SafetyConstraint::Cbf { gamma: relaxed });
                    let second = solve_sqp(&problem, warm.as_ref(), &self.cfg.solver);
                    retried = true;
                    gamma_used = Some(relaxed);
                    let (it, qp) = (result.sqp_iterations, result.qp_iterations_total);
                    result = second;
                    result.sqp_iterations += it;
                    result.qp_iterations_total += qp;
                }
            }
        }
        result.solve_time = started.elapsed().as_secs_f64();

        if result.status == SolveStatus::Infeasible {
            self.warm = None;
        } else {
            self.warm = Some(self.shifted_solution(&result));
        }
        let input = VirtualInput::new(result.inputs[0][0], result.inputs[0][1]);
        ControlStep { result, input, gamma_used, retried }
    }

    /// Previous solution moved one step forward, completed with the
    /// terminal controller.
    pub fn shifted_solution(&self, result: &SolveResult) -> DVector<f64> {
        let n = self.cfg.horizon;
        let mut v = DVector::zeros(2 * n);
        for k in 1..n {
            v[2 * (k - 1)] = result.inputs[k][0];
            v[2 * (k - 1) + 1] = result.inputs[k][1];
        }
        let zn = &result.predicted[n];
        let tail = self.terminal.k * Vector4::new(zn[0], zn[1], zn[2], zn[3]);
        v[2 * (n - 1)] = tail[0];
        v[2 * (n - 1) + 1] = tail[1];
        v
    }
}
