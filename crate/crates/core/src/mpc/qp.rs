//! Dense strictly convex QP solver.
//!
//! Solves `min 1/2 x'Hx + g'x  s.t.  Ax <= b` with the dual active-set
//! method of Goldfarb and Idnani. The iteration starts at the unconstrained
//! minimizer and adds the most violated constraint at each major step, so no
//! feasible starting point is needed and an empty feasible set is detected
//! exactly (a Farkas certificate is returned).

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct DenseQp {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    /// One inequality row per constraint, `a x <= b`.
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl DenseQp {
    pub fn unconstrained(hessian: DMatrix<f64>, gradient: DVector<f64>) -> Self {
        let n = gradient.len();
        Self { hessian, gradient, a: DMatrix::zeros(0, n), b: DVector::zeros(0) }
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.gradient.dot(x)
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers of every row, zero for inactive rows.
    pub multipliers: DVector<f64>,
    pub active: Vec<usize>,
    pub iterations: usize,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QpError {
    NotPositiveDefinite,
    /// `y >= 0` with `A'y = 0` and `b'y < 0`.
    Infeasible {
        certificate: DVector<f64>,
        iterations: usize,
    },
    MaxIterations(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    /// Smallest slack `b - Ax` (negative when violated).
    pub primal: f64,
    /// Smallest multiplier.
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn within(&self, tol: f64) -> bool {
        self.stationarity <= tol && self.primal >= -tol && self.dual >= -tol && self.complementarity <= tol
    }
}

pub fn kkt_residuals(qp: &DenseQp, x: &DVector<f64>, multipliers: &DVector<f64>) -> KktResiduals {
    let grad = &qp.hessian * x + &qp.gradient + qp.a.transpose() * multipliers;
    let slack = &qp.b - &qp.a * x;
    let complementarity = slack.iter().zip(multipliers.iter()).map(|(s, l)| (s * l).abs()).fold(0.0, f64::max);
    KktResiduals {
        stationarity: grad.amax(),
        primal: slack.iter().copied().fold(f64::INFINITY, f64::min),
        dual: multipliers.iter().copied().fold(f64::INFINITY, f64::min),
        complementarity,
    }
}

const FEAS_TOL: f64 = 1e-11;
const DEPENDENCE_TOL: f64 = 1e-12;

pub fn solve_qp(qp: &DenseQp) -> Result<QpSolution, QpError> {
    let n = qp.gradient.len();
    let m = qp.b.len();
    assert_eq!(qp.hessian.shape(), (n, n));
    assert_eq!(qp.a.shape(), (m, n));

    let chol = qp.hessian.clone().cholesky().ok_or(QpError::NotPositiveDefinite)?;
    let hinv = chol.inverse();
    let mut x = -(&hinv * &qp.gradient);

    let row_norms: Vec<f64> = (0..m).map(|i| qp.a.row(i).norm()).collect();
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut is_active = vec![false; m];
    let max_iter = 20 * (n + m) + 100;
    let mut iterations = 0usize;

    loop {
        // pick the most violated row, lowest index on ties
        let mut worst = None;
        let mut worst_slack = 0.0;
        for i in 0..m {
            if is_active[i] {
                continue;
            }
            let slack = qp.b[i] - qp.a.row(i).dot(&x.transpose());
            let scaled = if row_norms[i] > 0.0 { slack / row_norms[i] } else { slack };
            if scaled < -FEAS_TOL * (1.0 + qp.b[i].abs() / row_norms[i].max(1.0)) && scaled < worst_slack {
                worst_slack = scaled;
                worst = Some(i);
            }
        }
        let Some(p) = worst else { break };
        if row_norms[p] == 0.0 {
            // 0 <= b_p with b_p < 0
            let mut certificate = DVector::zeros(m);
            certificate[p] = 1.0;
            return Err(QpError::Infeasible { certificate, iterations });
        }

        let np: DVector<f64> = -qp.a.row(p).transpose();
        let mut u_p = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(QpError::MaxIterations(iterations));
            }
            let q = active.len();
            let hinv_np = &hinv * &np;
            let (z, r) = if q == 0 {
                (hinv_np.clone(), DVector::zeros(0))
            } else {
                let nmat = DMatrix::from_fn(n, q, |row, col| -qp.a[(active[col], row)]);
                let w = &hinv * &nmat;
                let gram = nmat.transpose() * &w;
                let r = match gram.clone().cholesky() {
                    Some(c) => c.solve(&(w.transpose() * &np)),
                    None => gram.lu().solve(&(w.transpose() * &np)).ok_or(QpError::NotPositiveDefinite)?,
                };
                (&hinv_np - &w * &r, r)
            };

            // partial step: the first active multiplier to reach zero
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for j in 0..q {
                if r[j] > 0.0 {
                    let t = u[j] / r[j];
                    if t < t1 {
                        t1 = t;
                        drop = Some(j);
                    }
                }
            }
            let curvature = z.dot(&np);
            let dependent = curvature <= DEPENDENCE_TOL * np.dot(&hinv_np).max(f64::MIN_POSITIVE);
            let slack_p = qp.b[p] - qp.a.row(p).dot(&x.transpose());
            let t2 = if dependent { f64::INFINITY } else { (-slack_p / curvature).max(0.0) };

            if dependent && drop.is_none() {
                let mut certificate = DVector::zeros(m);
                certificate[p] = 1.0;
                for j in 0..q {
                    certificate[active[j]] = (-r[j]).max(0.0);
                }
                return Err(QpError::Infeasible { certificate, iterations });
            }

            let t = t1.min(t2);
            for j in 0..q {
                u[j] -= t * r[j];
            }
            u_p += t;
            if !dependent {
                x += &z * t;
            }

            if t2 <= t1 {
                active.push(p);
                u.push(u_p);
                is_active[p] = true;
                break;
            }
            let j = drop.expect("partial step has a blocking multiplier");
            is_active[active[j]] = false;
            active.remove(j);
            u.remove(j);
        }
    }

    let mut multipliers = DVector::zeros(m);
    for (idx, &row) in active.iter().enumerate() {
        multipliers[row] = u[idx].max(0.0);
    }
    let objective = qp.objective(&x);
    Ok(QpSolution { x, multipliers, active, iterations, objective })
}

/// Solution of the elastic relaxation built by [`solve_elastic`].
#[derive(Debug, Clone)]
pub struct ElasticSolution {
    pub x: DVector<f64>,
    /// Slack of each relaxable row, in the order given.
    pub slack: DVector<f64>,
    /// Multipliers of the original rows.
    pub multipliers: DVector<f64>,
    pub iterations: usize,
}

/// Solves `min f(x) + weight * sum(s) + reg/2 |s|^2` subject to
/// `a_i x - s_i <= b_i` on the relaxable rows, `s >= 0`, and the remaining
/// rows unchanged. Feasible whenever the rows that are not relaxed are.
pub fn solve_elastic(qp: &DenseQp, relaxable: &[usize], weight: f64, reg: f64) -> Result<ElasticSolution, QpError> {
    let n = qp.gradient.len();
    let m = qp.b.len();
    let ns = relaxable.len();
    let mut hessian = DMatrix::zeros(n + ns, n + ns);
    hessian.view_mut((0, 0), (n, n)).copy_from(&qp.hessian);
    for j in 0..ns {
        hessian[(n + j, n + j)] = reg;
    }
    let mut gradient = DVector::from_element(n + ns, weight);
    gradient.rows_mut(0, n).copy_from(&qp.gradient);
    let mut a = DMatrix::zeros(m + ns, n + ns);
    a.view_mut((0, 0), (m, n)).copy_from(&qp.a);
    let mut b = DVector::zeros(m + ns);
    b.rows_mut(0, m).copy_from(&qp.b);
    for (j, &row) in relaxable.iter().enumerate() {
        a[(row, n + j)] = -1.0;
        a[(m + j, n + j)] = -1.0;
    }
    let sol = solve_qp(&DenseQp { hessian, gradient, a, b })?;
    Ok(ElasticSolution {
        x: sol.x.rows(0, n).into_owned(),
        slack: sol.x.rows(n, ns).map(|s| s.max(0.0)),
        multipliers: sol.multipliers.rows(0, m).into_owned(),
        iterations: sol.iterations,
    })
}
