//! Condensed QCQP over the virtual-input sequence.
//!
//! The predicted states are eliminated through `Z[k] = A^k z0 + G[k] V`,
//! where `V = (v0, ..., v[N-1])` stacks the inputs. What remains is a
//! quadratic objective in `V`, linear rows for the input, position and
//! terminal-controller bounds, and one quadratic barrier row per step and
//! obstacle.

use nalgebra::{DMatrix, DVector, Matrix2x4, Matrix4, RowDVector, Vector2, Vector4};

use super::config::{MpcConfig, SafetyConstraint};
use crate::lti::{LtiModel, TerminalData};
use crate::safety::Obstacle;

/// Number of linear rows of each kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowCounts {
    pub input: usize,
    pub position: usize,
    pub terminal: usize,
    pub barrier: usize,
}

impl RowCounts {
    pub fn linear(&self) -> usize {
        self.input + self.position + self.terminal
    }

    pub fn total(&self) -> usize {
        self.linear() + self.barrier
    }
}

/// `decay * H(z[step]) - H(z[step + 1]) <= 0` for one obstacle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierRow {
    pub step: usize,
    pub obstacle: Obstacle,
    pub decay: f64,
}

/// Everything about the condensed problem that does not depend on `z0`.
#[derive(Debug, Clone)]
pub struct CondensedModel {
    pub horizon: usize,
    /// `A^k` for `k = 0..=N`.
    pub state_powers: Vec<Matrix4<f64>>,
    /// `G[k]`, the sensitivity of `Z[k]` to `V`, for `k = 0..=N`.
    pub input_maps: Vec<DMatrix<f64>>,
    /// Rows of `G[k]` for the positions `(z1, z3)`.
    pub position_maps: Vec<DMatrix<f64>>,
    pub hessian: DMatrix<f64>,
    /// Gradient is `gradient_map * z0`.
    pub gradient_map: DMatrix<f64>,
    /// Constant cost is `z0' constant_map z0`.
    pub constant_map: Matrix4<f64>,
    pub linear_a: DMatrix<f64>,
    /// Right-hand side is `linear_b0 + linear_bz * z0`.
    pub linear_b0: DVector<f64>,
    pub linear_bz: DMatrix<f64>,
    pub counts: RowCounts,
    pub position_min: Vector2<f64>,
    pub position_max: Vector2<f64>,
    pub v_min: Vector2<f64>,
    pub v_max: Vector2<f64>,
}

fn position_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(2, m.ncols());
    p.row_mut(0).copy_from(&m.row(0));
    p.row_mut(1).copy_from(&m.row(2));
    p
}

impl CondensedModel {
    pub fn new(cfg: &MpcConfig, model: &LtiModel, terminal: &TerminalData) -> Self {
        let n = cfg.horizon;
        let nv = 2 * n;

        let mut state_powers = Vec::with_capacity(n + 1);
        let mut input_maps: Vec<DMatrix<f64>> = Vec::with_capacity(n + 1);
        state_powers.push(Matrix4::identity());
        input_maps.push(DMatrix::zeros(4, nv));
        for k in 1..=n {
            state_powers.push(model.a * state_powers[k - 1]);
            // G[k] = A G[k-1] + B e[k-1]
            let a = DMatrix::from_fn(4, 4, |i, j| model.a[(i, j)]);
            let mut g = a * &input_maps[k - 1];
            for i in 0..4 {
                for j in 0..2 {
                    g[(i, 2 * (k - 1) + j)] += model.b[(i, j)];
                }
            }
            input_maps.push(g);
        }
        let position_maps = input_maps.iter().map(position_rows).collect();

        let dq = DMatrix::from_fn(4, 4, |i, j| cfg.q[(i, j)]);
        let dqbar = DMatrix::from_fn(4, 4, |i, j| terminal.qbar[(i, j)]);
        let mut hessian = DMatrix::zeros(nv, nv);
        let mut gradient_map = DMatrix::zeros(nv, 4);
        let mut constant_map = Matrix4::zeros();
        for k in 0..=n {
            let (w, ws) = if k < n { (&dq, cfg.q) } else { (&dqbar, terminal.qbar) };
            let g = &input_maps[k];
            let f = DMatrix::from_fn(4, 4, |i, j| state_powers[k][(i, j)]);
            hessian += g.transpose() * w * g * 2.0;
            gradient_map += g.transpose() * w * &f * 2.0;
            constant_map += state_powers[k].transpose() * ws * state_powers[k];
        }
        for k in 0..n {
            for i in 0..2 {
                for j in 0..2 {
                    hessian[(2 * k + i, 2 * k + j)] += 2.0 * cfg.r[(i, j)];
                }
            }
        }
        let hessian = (&hessian + hessian.transpose()) * 0.5;

        let counts =
            RowCounts { input: 4 * n, position: 4 * n, terminal: 8 * (cfg.constraint_horizon + 1), barrier: 0 };
        let rows = counts.linear();
        let mut a = DMatrix::zeros(rows, nv);
        let mut b0 = DVector::zeros(rows);
        let mut bz = DMatrix::zeros(rows, 4);
        let mut row = 0;

        for k in 0..n {
            for i in 0..2 {
                a[(row, 2 * k + i)] = 1.0;
                b0[row] = cfg.v_max[i];
                a[(row + 1, 2 * k + i)] = -1.0;
                b0[row + 1] = -cfg.v_min[i];
                row += 2;
            }
        }

        // lo <= s' (F z0 + G V) <= hi  as  s'G V <= hi - s'F z0  and  -s'G V <= s'F z0 - lo
        let mut push_pair =
            |row: &mut usize, sel_g: RowDVector<f64>, sel_f: nalgebra::RowVector4<f64>, lo: f64, hi: f64| {
                a.row_mut(*row).copy_from(&sel_g);
                b0[*row] = hi;
                for j in 0..4 {
                    bz[(*row, j)] = -sel_f[j];
                }
                a.row_mut(*row + 1).copy_from(&(-&sel_g));
                b0[*row + 1] = -lo;
                for j in 0..4 {
                    bz[(*row + 1, j)] = sel_f[j];
                }
                *row += 2;
            };

        for k in 1..=n {
            for (axis, idx) in [0usize, 2].into_iter().enumerate() {
                let sel_g = input_maps[k].row(idx).into_owned();
                let sel_f = state_powers[k].row(idx).into_owned();
                push_pair(&mut row, sel_g, sel_f, cfg.position_min[axis], cfg.position_max[axis]);
            }
        }

        let acl = model.closed_loop(&terminal.k);
        let gn = &input_maps[n];
        let fnn = state_powers[n];
        let mut power = Matrix4::identity();
        for _ in 0..=cfg.constraint_horizon {
            let kt: Matrix2x4<f64> = terminal.k * power;
            for i in 0..2 {
                let sel = kt.row(i).into_owned();
                let sel_g = DMatrix::from_fn(1, 4, |_, j| sel[j]) * gn;
                let sel_g = RowDVector::from_iterator(nv, sel_g.iter().copied());
                push_pair(&mut row, sel_g, sel * fnn, cfg.v_min[i], cfg.v_max[i]);
            }
            for (axis, idx) in [0usize, 2].into_iter().enumerate() {
                let sel = power.row(idx).into_owned();
                let sel_g = DMatrix::from_fn(1, 4, |_, j| sel[j]) * gn;
                let sel_g = RowDVector::from_iterator(nv, sel_g.iter().copied());
                push_pair(&mut row, sel_g, sel * fnn, cfg.position_min[axis], cfg.position_max[axis]);
            }
            power = acl * power;
        }
        debug_assert_eq!(row, rows);

        Self {
            horizon: n,
            state_powers,
            input_maps,
            position_maps,
            hessian,
            gradient_map,
            constant_map,
            linear_a: a,
            linear_b0: b0,
            linear_bz: bz,
            counts,
            position_min: cfg.position_min,
            position_max: cfg.position_max,
            v_min: cfg.v_min,
            v_max: cfg.v_max,
        }
    }
}

/// One instance of the finite-horizon problem, `min 1/2 V'HV + g'V + c`.
#[derive(Debug, Clone)]
pub struct QcqpProblem<'a> {
    pub condensed: &'a CondensedModel,
    pub z0: Vector4<f64>,
    pub gradient: DVector<f64>,
    pub constant: f64,
    pub linear_b: DVector<f64>,
    pub barrier_rows: Vec<BarrierRow>,
    pub counts: RowCounts,
    /// Set when `z0` already violates the position box.
    pub infeasible_start: bool,
}

impl QcqpProblem<'_> {
    pub fn horizon(&self) -> usize {
        self.condensed.horizon
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.condensed.hessian
    }

    pub fn linear_a(&self) -> &DMatrix<f64> {
        &self.condensed.linear_a
    }

    pub fn state(&self, k: usize, v: &DVector<f64>) -> Vector4<f64> {
        let g = &self.condensed.input_maps[k] * v;
        self.condensed.state_powers[k] * self.z0 + Vector4::new(g[0], g[1], g[2], g[3])
    }

    pub fn states(&self, v: &DVector<f64>) -> Vec<Vector4<f64>> {
        (0..=self.horizon()).map(|k| self.state(k, v)).collect()
    }

    fn position(&self, k: usize, v: &DVector<f64>) -> Vector2<f64> {
        let s = self.state(k, v);
        Vector2::new(s[0], s[2])
    }

    /// Objective including the constant term, i.e. the full MPC cost.
    pub fn cost(&self, v: &DVector<f64>) -> f64 {
        0.5 * v.dot(&(self.hessian() * v)) + self.gradient.dot(v) + self.constant
    }

    /// Values of the barrier rows; feasible rows are `<= 0`.
    pub fn barrier_values(&self, v: &DVector<f64>) -> Vec<f64> {
        self.barrier_rows
            .iter()
            .map(|row| {
                let h = |k: usize| {
                    let p = self.position(k, v);
                    row.obstacle.barrier_at(p[0], p[1])
                };
                row.decay * h(row.step) - h(row.step + 1)
            })
            .collect()
    }

    /// Gradient of one barrier row with respect to `V`.
    pub fn barrier_gradient(&self, row: &BarrierRow, v: &DVector<f64>) -> DVector<f64> {
        let grad_h = |k: usize| -> DVector<f64> {
            let p = self.position(k, v) - row.obstacle.center();
            self.condensed.position_maps[k].transpose() * DVector::from_column_slice(&[2.0 * p[0], 2.0 * p[1]])
        };
        grad_h(row.step) * row.decay - grad_h(row.step + 1)
    }

    /// Hessian of one barrier row (constant in `V`).
    pub fn barrier_hessian(&self, row: &BarrierRow) -> DMatrix<f64> {
        let pk = &self.condensed.position_maps[row.step];
        let pk1 = &self.condensed.position_maps[row.step + 1];
        (pk.transpose() * pk) * (2.0 * row.decay) - (pk1.transpose() * pk1) * 2.0
    }

    /// Largest violation of the linear rows, zero when satisfied.
    pub fn linear_violation(&self, v: &DVector<f64>) -> f64 {
        let slack = &self.linear_b - self.linear_a() * v;
        slack.iter().map(|s| (-s).max(0.0)).fold(0.0, f64::max)
    }

    pub fn max_violation(&self, v: &DVector<f64>) -> f64 {
        let quad = self.barrier_values(v).into_iter().fold(0.0, f64::max);
        quad.max(self.linear_violation(v))
    }
}

/// Assembles the problem for the current state `z0`.
///
/// `z0` and the obstacles must already be expressed relative to the goal.
pub fn build_qcqp<'a>(
    z0: &Vector4<f64>,
    condensed: &'a CondensedModel,
    safety: SafetyConstraint,
    obstacles: &[Obstacle],
) -> QcqpProblem<'a> {
    let gradient = &condensed.gradient_map * DVector::from_column_slice(z0.as_slice());
    let constant = (z0.transpose() * condensed.constant_map * z0)[0];
    let linear_b = &condensed.linear_b0 + &condensed.linear_bz * DVector::from_column_slice(z0.as_slice());
    let mut barrier_rows = Vec::new();
    if let Some(decay) = safety.decay() {
        for step in 0..condensed.horizon {
            for obstacle in obstacles {
                barrier_rows.push(BarrierRow { step, obstacle: *obstacle, decay });
            }
        }
    }
    let counts = RowCounts { barrier: barrier_rows.len(), ..condensed.counts };
    let (lo, hi) = (condensed.position_min, condensed.position_max);
    let infeasible_start = z0[0] < lo[0] || z0[0] > hi[0] || z0[2] < lo[1] || z0[2] > hi[1];
    QcqpProblem { condensed, z0: *z0, gradient, constant, linear_b, barrier_rows, counts, infeasible_start }
}
