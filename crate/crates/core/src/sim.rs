//! Closed-loop simulation: measure, map, solve, linearize, integrate.

use nalgebra::{DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dfl::{dfl_control, map_x_to_z, DflGuard, VirtualInput};
use crate::error::{Error, Result};
use crate::lti::TerminalData;
use crate::model::{
    extended_derivative, rk4_step, rk4_unicycle, unicycle_to_wheel, ExtendedInput, ExtendedState, RobotParams,
    UnicycleInput, WheelSpeeds,
};
use crate::mpc::{solve_scnmpc, MpcConfig, MpcController, NmpcConfig, SafetyConstraint, SolveStatus};
use crate::safety::Obstacle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Linear MPC with discrete barrier rows.
    Cbf,
    /// Linear MPC with pointwise distance rows.
    Euclid,
    /// Nonlinear MPC on the unicycle with barrier rows.
    Nmpc,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Cbf => "cbf",
            Mode::Euclid => "euclid",
            Mode::Nmpc => "nmpc",
        }
    }

    pub fn safety(&self, gamma: f64) -> SafetyConstraint {
        match self {
            Mode::Cbf | Mode::Nmpc => SafetyConstraint::Cbf { gamma },
            Mode::Euclid => SafetyConstraint::Euclidean,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cbf" => Ok(Mode::Cbf),
            "euclid" => Ok(Mode::Euclid),
            "nmpc" => Ok(Mode::Nmpc),
            _ => Err(Error::config("scenario.mode", format!("unknown mode `{s}` (expected cbf, euclid or nmpc)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub enabled: bool,
    pub variance: f64,
    pub seed: u64,
    /// Which of `(x1, x2, x3)` are corrupted.
    pub mask: [bool; 3],
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { enabled: false, variance: 0.05, seed: 0, mask: [true; 3] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub initial: ExtendedState,
    pub goal: Vector2<f64>,
    pub obstacles: Vec<Obstacle>,
    pub mpc: MpcConfig,
    pub guard: DflGuard,
    pub robot: RobotParams,
    pub duration: f64,
    pub noise: NoiseConfig,
    /// Index of this run within a batch; selects the noise stream.
    pub stream: u64,
    pub mode: Mode,
    /// RK4 substeps per sampling period.
    pub substeps: usize,
    /// Speed bound of the nonlinear baseline.
    pub nmpc_input_bound: Vector2<f64>,
    pub warm_start: bool,
}

impl Scenario {
    /// Start at `(7, 7)` heading `pi` with speed 0.5, goal at the origin,
    /// one obstacle of radius 1.5 centred on the straight path.
    pub fn nominal() -> Self {
        Self {
            initial: ExtendedState::new(7.0, 7.0, std::f64::consts::PI, 0.5),
            goal: Vector2::zeros(),
            obstacles: vec![Obstacle { x_obs: 3.5, y_obs: 3.5, r_obs: 1.5 }],
            mpc: MpcConfig::default(),
            guard: DflGuard::default(),
            robot: RobotParams::default(),
            duration: 30.0,
            noise: NoiseConfig::default(),
            stream: 0,
            mode: Mode::Cbf,
            substeps: 1,
            nmpc_input_bound: Vector2::new(4.0, 4.0),
            warm_start: true,
        }
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.mpc.ts).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.mpc.validate()?;
        self.robot.validate()?;
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(Error::config("scenario.duration", "must be positive"));
        }
        if !self.initial.is_finite() {
            return Err(Error::config("scenario.initial", "must be finite"));
        }
        if !(self.noise.variance.is_finite() && self.noise.variance >= 0.0) {
            return Err(Error::config("noise.variance", "must be nonnegative"));
        }
        if self.substeps == 0 {
            return Err(Error::config("scenario.substeps", "must be at least 1"));
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            o.validate(&format!("obstacles[{i}]"))?;
            if o.barrier_at(self.initial.x1, self.initial.x2) < 0.0 {
                return Err(Error::config(format!("obstacles[{i}]"), "initial position lies inside the obstacle"));
            }
        }
        Ok(())
    }
}

/// One sampled instant of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: f64,
    pub state: ExtendedState,
    pub input: ExtendedInput,
    pub wheels: WheelSpeeds,
    pub v: VirtualInput,
    pub barrier: Vec<f64>,
    pub distance: Vec<f64>,
    pub cost: f64,
    pub sqp_iterations: usize,
    pub qp_iterations: usize,
    pub solve_time: f64,
    pub retried: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogSummary {
    pub min_distance: f64,
    pub final_position_error: f64,
    pub max_solve_time: f64,
    pub steps: usize,
    /// Step at which the solver reported infeasibility.
    pub aborted_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub mode: Mode,
    pub ts: f64,
    pub goal: Vector2<f64>,
    pub obstacles: Vec<Obstacle>,
    pub records: Vec<StepRecord>,
    pub summary: LogSummary,
}

impl TrajectoryLog {
    pub fn aborted(&self) -> bool {
        self.summary.aborted_at.is_some()
    }
}

/// Adds zero-mean Gaussian noise of the given variance to the pose entries
/// selected by `mask`. The speed state is internal and never corrupted.
pub fn inject_noise<R: Rng + ?Sized>(s: &ExtendedState, variance: f64, mask: [bool; 3], rng: &mut R) -> ExtendedState {
    if variance == 0.0 {
        return *s;
    }
    let normal = Normal::new(0.0, variance.sqrt()).expect("variance checked nonnegative");
    let mut out = *s;
    let mut draw = |on: bool| if on { normal.sample(rng) } else { 0.0 };
    out.x1 += draw(mask[0]);
    out.x2 += draw(mask[1]);
    out.x3 += draw(mask[2]);
    out
}

/// Reproducible per-run noise stream.
pub fn noise_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn advance_linearized(
    s: &ExtendedState,
    v: &VirtualInput,
    guard: &DflGuard,
    ts: f64,
    substeps: usize,
) -> ExtendedState {
    let h = ts / substeps as f64;
    let f = |x: &nalgebra::Vector4<f64>| {
        let s = ExtendedState::from_vector(x);
        extended_derivative(&s, &dfl_control(&s, v, guard))
    };
    let mut x = s.to_vector();
    for _ in 0..substeps {
        x = rk4_step(f, &x, h);
    }
    ExtendedState::from_vector(&x)
}

fn advance_unicycle(s: &ExtendedState, u: &UnicycleInput, ts: f64, substeps: usize) -> ExtendedState {
    let h = ts / substeps as f64;
    let mut p = s.pose();
    for _ in 0..substeps {
        p = rk4_unicycle(&p, u, h);
    }
    ExtendedState::new(p.x1, p.x2, p.x3, u.u1)
}

struct NmpcRunner {
    cfg: NmpcConfig,
    safety: SafetyConstraint,
    warm: Option<DVector<f64>>,
    warm_start: bool,
}

/// Runs the scenario to completion or to the first infeasible step.
///
/// A record is written for every sampled instant `0..=steps`; the control
/// computed at the last instant is logged but not applied.
pub fn run_closed_loop(sc: &Scenario) -> Result<TrajectoryLog> {
    sc.validate()?;
    let steps = sc.steps();
    let ts = sc.mpc.ts;
    let mut rng = noise_rng(sc.noise.seed, sc.stream);
    let variance = if sc.noise.enabled { sc.noise.variance } else { 0.0 };

    let mut linear = None;
    let mut nonlinear = None;
    match sc.mode {
        Mode::Cbf | Mode::Euclid => {
            let mut c = MpcController::new(&sc.mpc, sc.goal, &sc.obstacles, sc.mode.safety(sc.mpc.gamma))?;
            c.warm_start = sc.warm_start;
            linear = Some(c);
        }
        Mode::Nmpc => {
            let model = crate::lti::discretize_double_integrator(ts)?;
            let terminal = TerminalData::lqr(&model, &sc.mpc.q, &sc.mpc.r)?;
            let mut cfg = NmpcConfig::matching(sc.mpc.horizon, ts, &sc.mpc.q, &sc.mpc.r, &terminal.qbar);
            cfg.u_min = -sc.nmpc_input_bound;
            cfg.u_max = sc.nmpc_input_bound;
            cfg.solver = sc.mpc.solver;
            nonlinear =
                Some(NmpcRunner { cfg, safety: sc.mode.safety(sc.mpc.gamma), warm: None, warm_start: sc.warm_start });
        }
    }

    let mut plant = sc.initial;
    let mut records = Vec::with_capacity(steps + 1);
    let mut aborted_at = None;
    for k in 0..=steps {
        let measured = inject_noise(&plant, variance, sc.noise.mask, &mut rng);
        let (v, applied, cost, iters, qp_iters, time, retried, status) = if let Some(ctrl) = linear.as_mut() {
            let z = map_x_to_z(&measured);
            let step = ctrl.step(&z);
            let u = dfl_control(&plant, &step.input, &sc.guard);
            let r = &step.result;
            (step.input, u, r.cost, r.sqp_iterations, r.qp_iterations_total, r.solve_time, step.retried, r.status)
        } else {
            let runner = nonlinear.as_mut().expect("one controller is set");
            let warm = if runner.warm_start { runner.warm.take() } else { None };
            let res =
                solve_scnmpc(&measured.pose(), &sc.goal, &runner.cfg, runner.safety, &sc.obstacles, warm.as_ref());
            let n = runner.cfg.horizon;
            let mut shifted = res.stacked_inputs();
            if n > 1 {
                for i in 0..2 * (n - 1) {
                    shifted[i] = shifted[i + 2];
                }
            }
            runner.warm = Some(shifted);
            let first = res.inputs[0];
            let u = ExtendedInput::new(first[0], first[1]);
            (
                VirtualInput::new(0.0, 0.0),
                u,
                res.cost,
                res.sqp_iterations,
                res.qp_iterations_total,
                res.solve_time,
                false,
                res.status,
            )
        };

        let (speed, yaw_rate) = match sc.mode {
            Mode::Nmpc => (applied.u1, applied.u2),
            _ => (plant.zeta, applied.u2),
        };
        let wheels = unicycle_to_wheel(UnicycleInput { u1: speed, u2: yaw_rate }, &sc.robot);
        let infeasible = status == SolveStatus::Infeasible;
        records.push(StepRecord {
            t: k as f64 * ts,
            state: plant,
            input: applied,
            wheels,
            v,
            barrier: sc.obstacles.iter().map(|o| o.barrier_at(plant.x1, plant.x2)).collect(),
            distance: sc.obstacles.iter().map(|o| o.distance(plant.x1, plant.x2)).collect(),
            cost: if infeasible { f64::NAN } else { cost },
            sqp_iterations: iters,
            qp_iterations: qp_iters,
            solve_time: time,
            retried,
        });
        if infeasible {
            aborted_at = Some(k);
            break;
        }
        if k == steps {
            break;
        }
        plant = match sc.mode {
            Mode::Nmpc => advance_unicycle(&plant, &UnicycleInput { u1: applied.u1, u2: applied.u2 }, ts, sc.substeps),
            _ => advance_linearized(&plant, &v, &sc.guard, ts, sc.substeps),
        };
    }

    let summary = summarize(&records, &sc.goal, aborted_at);
    Ok(TrajectoryLog { mode: sc.mode, ts, goal: sc.goal, obstacles: sc.obstacles.clone(), records, summary })
}

fn summarize(records: &[StepRecord], goal: &Vector2<f64>, aborted_at: Option<usize>) -> LogSummary {
    let min_distance = records.iter().flat_map(|r| r.distance.iter().copied()).fold(f64::INFINITY, f64::min);
    let last = records.last().expect("at least one record");
    LogSummary {
        min_distance,
        final_position_error: (last.state.x1 - goal[0]).hypot(last.state.x2 - goal[1]),
        max_solve_time: records.iter().map(|r| r.solve_time).fold(0.0, f64::max),
        steps: records.len(),
        aborted_at,
    }
}

/// Smallest signed boundary distance to `obs` over the log.
pub fn min_obstacle_distance(log: &TrajectoryLog, obs: &Obstacle) -> f64 {
    log.records.iter().map(|r| obs.distance(r.state.x1, r.state.x2)).fold(f64::INFINITY, f64::min)
}

/// Optimal costs along a run and the descent margins
/// `J(k+1) - J(k) + |z_k|_Q^2 + |v_k|_R^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSequence {
    pub costs: Vec<f64>,
    pub margins: Vec<f64>,
}

pub fn cost_sequence(log: &TrajectoryLog, q: &nalgebra::Matrix4<f64>, r: &nalgebra::Matrix2<f64>) -> CostSequence {
    let costs: Vec<f64> = log.records.iter().map(|r| r.cost).collect();
    let mut margins = Vec::with_capacity(costs.len().saturating_sub(1));
    for k in 0..costs.len().saturating_sub(1) {
        let rec = &log.records[k];
        let z = map_x_to_z(&rec.state).to_vector() - nalgebra::Vector4::new(log.goal[0], 0.0, log.goal[1], 0.0);
        let v = rec.v.to_vector();
        let stage = (z.transpose() * q * z)[0] + (v.transpose() * r * v)[0];
        margins.push(costs[k + 1] - costs[k] + stage);
    }
    CostSequence { costs, margins }
}

/// Distance of a point from the straight line through `a` and `b`.
pub fn lateral_deviation(a: &Vector2<f64>, b: &Vector2<f64>, p: &Vector2<f64>) -> f64 {
    let d = b - a;
    let w = p - a;
    (d[0] * w[1] - d[1] * w[0]).abs() / d.norm()
}

/// First record whose lateral deviation from the start-goal line exceeds
/// `threshold`.
pub fn first_deviation_step(log: &TrajectoryLog, threshold: f64) -> Option<usize> {
    let first = log.records.first()?;
    let start = Vector2::new(first.state.x1, first.state.x2);
    log.records
        .iter()
        .position(|r| lateral_deviation(&start, &log.goal, &Vector2::new(r.state.x1, r.state.x2)) > threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_variance_is_identity() {
        let s = ExtendedState::new(1.0, 2.0, 0.3, 0.4);
        let mut rng = noise_rng(1, 0);
        assert_eq!(inject_noise(&s, 0.0, [true; 3], &mut rng), s);
    }

    #[test]
    fn noise_stream_is_reproducible_and_masked() {
        let s = ExtendedState::new(1.0, 2.0, 0.3, 0.4);
        let mut a = noise_rng(7, 3);
        let mut b = noise_rng(7, 3);
        for _ in 0..50 {
            let na = inject_noise(&s, 0.05, [true, false, true], &mut a);
            let nb = inject_noise(&s, 0.05, [true, false, true], &mut b);
            assert_eq!(na, nb);
            assert_eq!(na.x2, 2.0);
            assert_eq!(na.zeta, 0.4);
        }
        let mut c = noise_rng(7, 4);
        assert_ne!(inject_noise(&s, 0.05, [true; 3], &mut noise_rng(7, 3)), inject_noise(&s, 0.05, [true; 3], &mut c));
    }

    #[test]
    fn noise_moments() {
        let s = ExtendedState::default();
        let mut rng = noise_rng(42, 0);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| inject_noise(&s, 0.05, [true; 3], &mut rng).x1).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - 0.05).abs() < 0.05 * 0.05);
    }

    #[test]
    fn lateral_deviation_geometry() {
        let a = Vector2::new(7.0, 7.0);
        let b = Vector2::zeros();
        assert!(lateral_deviation(&a, &b, &Vector2::new(3.0, 3.0)).abs() < 1e-15);
        let d = lateral_deviation(&a, &b, &Vector2::new(1.0, 0.0));
        assert!((d - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn start_inside_obstacle_is_rejected() {
        let mut sc = Scenario::nominal();
        sc.initial = ExtendedState::new(3.5, 3.6, 0.0, 0.5);
        assert!(matches!(run_closed_loop(&sc), Err(Error::Config { .. })));
    }

    #[test]
    fn min_distance_helpers_agree() {
        let mut sc = Scenario::nominal();
        sc.duration = 1.0;
        let log = run_closed_loop(&sc).unwrap();
        assert_eq!(log.records.len(), 21);
        assert_eq!(min_obstacle_distance(&log, &sc.obstacles[0]), log.summary.min_distance);
        for w in log.records.windows(2) {
            assert!((w[1].t - w[0].t - 0.05).abs() < 1e-12);
        }
    }

    #[test]
    fn guard_holds_in_logged_inputs() {
        let mut sc = Scenario::nominal();
        sc.obstacles.clear();
        sc.initial = ExtendedState::new(1.0, 0.5, 0.0, 0.0);
        sc.duration = 0.5;
        let log = run_closed_loop(&sc).unwrap();
        for r in &log.records {
            if r.state.zeta <= sc.guard.zeta_threshold {
                assert_eq!(r.input.u2, 0.0);
            }
        }
        assert_eq!(log.records[0].input.u2, 0.0);
    }
}
