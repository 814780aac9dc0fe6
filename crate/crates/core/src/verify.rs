//! Self-checks behind the `verify` subcommand.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{SVector, Vector2, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dfl::{
    decoupling_matrix, dfl_control, map_x_to_z, map_z_to_x, verify_relative_degree, DflGuard, VirtualInput,
};
use crate::lti::{
    discretize_double_integrator, lyapunov_residual, riccati_residual, riccati_solution, LtiModel, TerminalData,
};
use crate::model::{
    extended_derivative, rk4_step, unicycle_to_wheel, wheel_to_unicycle, ExtendedState, RobotParams, WheelSpeeds,
};
use crate::safety::{sample_terminal_region, terminal_safety_check, CbfParams};
use crate::sim::Scenario;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{} {:<28} {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail)?;
        }
        let passed = self.checks.iter().filter(|c| c.pass).count();
        write!(f, "{passed}/{} checks passed", self.checks.len())
    }
}

fn wrap(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

/// Exact zero-order-hold solution of the two double integrators.
pub fn exact_double_integrator(z: &Vector4<f64>, v: &Vector2<f64>, t: f64) -> Vector4<f64> {
    Vector4::new(
        z[0] + z[1] * t + 0.5 * v[0] * t * t,
        z[1] + v[0] * t,
        z[2] + z[3] * t + 0.5 * v[1] * t * t,
        z[3] + v[1] * t,
    )
}

/// Worst z-coordinate deviation between the linearized unicycle and the
/// exact double integrator under piecewise-constant inputs.
pub fn dfl_equivalence_error(
    initial: &ExtendedState,
    inputs: &[Vector2<f64>],
    ts: f64,
    hold: usize,
    guard: &DflGuard,
) -> f64 {
    let mut x: SVector<f64, 4> = initial.to_vector();
    let mut z = map_x_to_z(initial).to_vector();
    let mut worst: f64 = 0.0;
    for k in 0..inputs.len() * hold {
        let v = inputs[k / hold];
        let vi = VirtualInput::new(v[0], v[1]);
        let f = |s: &SVector<f64, 4>| {
            let st = ExtendedState::from_vector(s);
            extended_derivative(&st, &dfl_control(&st, &vi, guard))
        };
        x = rk4_step(f, &x, ts);
        z = exact_double_integrator(&z, &v, ts);
        let mapped = map_x_to_z(&ExtendedState::from_vector(&x)).to_vector();
        worst = worst.max((mapped - z).amax());
    }
    worst
}

/// Runs every check with the given scenario's parameters.
pub fn run_verification(sc: &Scenario, seed: u64) -> VerifyReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    let guard = sc.guard;

    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let s = ExtendedState::new(
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
            rng.random_range(-PI..PI),
            rng.random_range(0.05..5.0),
        );
        let back = map_z_to_x(&map_x_to_z(&s), &guard).expect("speed above threshold");
        worst = worst
            .max((back.x1 - s.x1).abs())
            .max((back.x2 - s.x2).abs())
            .max(wrap(back.x3 - s.x3).abs())
            .max((back.zeta - s.zeta).abs());
    }
    checks.push(Check {
        name: "mapping round trip",
        pass: worst <= 1e-12,
        detail: format!("max error {worst:.2e} (tol 1e-12)"),
    });

    let mut worst: f64 = 0.0;
    let mut rd: f64 = 0.0;
    for _ in 0..200 {
        let s = ExtendedState::new(0.0, 0.0, rng.random_range(-PI..PI), rng.random_range(0.05..5.0));
        worst = worst.max((decoupling_matrix(&s).1 - s.zeta).abs());
        rd = rd.max(verify_relative_degree(&s).max_deviation);
    }
    checks.push(Check {
        name: "decoupling determinant",
        pass: worst <= 1e-14,
        detail: format!("max |det - zeta| {worst:.2e}"),
    });
    checks.push(Check {
        name: "relative degree",
        pass: rd <= 1e-6,
        detail: format!("max Lie-derivative deviation {rd:.2e}"),
    });

    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let p = RobotParams::new(rng.random_range(0.01..2.0), rng.random_range(0.01..2.0)).expect("positive");
        let w = WheelSpeeds { omega_r: rng.random_range(-10.0..10.0), omega_l: rng.random_range(-10.0..10.0) };
        let back = unicycle_to_wheel(wheel_to_unicycle(w, &p), &p);
        worst = worst.max((back.omega_r - w.omega_r).abs()).max((back.omega_l - w.omega_l).abs());
    }
    checks.push(Check { name: "wheel map round trip", pass: worst <= 1e-12, detail: format!("max error {worst:.2e}") });

    let inputs: Vec<Vector2<f64>> =
        (0..20).map(|_| Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
    let err = dfl_equivalence_error(&ExtendedState::new(0.0, 0.0, 0.3, 1.0), &inputs, 0.005, 10, &guard);
    checks.push(Check {
        name: "linearization equivalence",
        pass: err <= 1e-4,
        detail: format!("max z deviation {err:.2e} over 200 steps"),
    });

    let cfg = &sc.mpc;
    match discretize_double_integrator(cfg.ts).and_then(|m| TerminalData::lqr(&m, &cfg.q, &cfg.r).map(|t| (m, t))) {
        Ok((model, t)) => terminal_checks(&mut checks, sc, &model, &t, &mut rng),
        Err(e) => checks.push(Check { name: "terminal ingredients", pass: false, detail: e.to_string() }),
    }
    VerifyReport { checks }
}

fn terminal_checks(checks: &mut Vec<Check>, sc: &Scenario, model: &LtiModel, t: &TerminalData, rng: &mut ChaCha8Rng) {
    let cfg = &sc.mpc;
    let lyap = lyapunov_residual(model, &t.k, &cfg.q, &cfg.r, &t.qbar);
    checks.push(Check { name: "lyapunov residual", pass: lyap <= 1e-9, detail: format!("{lyap:.2e} (tol 1e-9)") });
    let ric = riccati_solution(model, &cfg.q, &cfg.r).map(|p| riccati_residual(model, &p, &cfg.q, &cfg.r));
    let ric = ric.unwrap_or(f64::INFINITY);
    checks.push(Check { name: "riccati residual", pass: ric <= 1e-9, detail: format!("{ric:.2e} (tol 1e-9)") });
    checks.push(Check {
        name: "closed-loop spectral radius",
        pass: t.spectral_radius < 1.0,
        detail: format!("{:.6}", t.spectral_radius),
    });

    let acl = model.closed_loop(&t.k);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let z0 = Vector4::from_fn(|_, _| rng.random_range(-5.0..5.0));
        let mut z = z0;
        let mut sum = 0.0;
        for _ in 0..20_000 {
            let v = t.k * z;
            sum += (z.transpose() * cfg.q * z)[0] + (v.transpose() * cfg.r * v)[0];
            z = acl * z;
            if z.amax() < 1e-13 {
                break;
            }
        }
        let exact = (z0.transpose() * t.qbar * z0)[0];
        worst = worst.max((sum - exact).abs() / exact);
    }
    checks.push(Check {
        name: "terminal cost equivalence",
        pass: worst <= 1e-6,
        detail: format!("max relative error {worst:.2e}"),
    });

    let obstacles: Vec<_> = sc.obstacles.iter().map(|o| o.shifted(sc.goal)).collect();
    let samples = sample_terminal_region(1.0, 0.5, &obstacles, 10_000, rng);
    if samples.is_empty() {
        checks.push(Check { name: "terminal safety", pass: false, detail: "no samples outside the obstacles".into() });
        return;
    }
    let detail =
        match CbfParams::new(cfg.gamma).and_then(|p| terminal_safety_check(model, &t.k, &p, &obstacles, &samples)) {
            Ok(r) => {
                checks.push(Check {
                    name: "terminal safety",
                    pass: r.pass,
                    detail: format!("worst margin {:.3e} over {} samples", r.worst_margin, r.samples),
                });
                return;
            }
            Err(e) => e.to_string(),
        };
    checks.push(Check { name: "terminal safety", pass: false, detail });
}
