//! Configuration files, batch execution and result files.
//!
//! A run is described by one JSON document. Every section is optional and
//! falls back to the nominal scenario:
//!
//! ```json
//! {
//!   "seed": 0,
//!   "scenario": { "initial": { "x1": 7.0, "x2": 7.0, "x3": 3.141592653589793, "zeta": 0.5 },
//!                 "goal": [0.0, 0.0], "duration": 30.0, "mode": "cbf", "substeps": 1 },
//!   "obstacles": [ { "x_obs": 3.5, "y_obs": 3.5, "r_obs": 1.5 } ],
//!   "robot": { "wheel_radius": 0.1, "axle_length": 0.5 },
//!   "dfl": { "zeta_threshold": 0.01 },
//!   "mpc": { "horizon": 8, "constraint_horizon": 10, "gamma": 0.1, "ts": 0.05,
//!            "q": [1, 1, 1, 1], "r": [0.1, 0.1] },
//!   "noise": { "enabled": false, "variance": 0.05, "mask": [true, true, true] },
//!   "sweep": { "gamma": [0.1, 0.5, 1.0], "horizon": [8], "mode": ["cbf"] }
//! }
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix2, Matrix4, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dfl::DflGuard;
use crate::error::{Error, Result};
use crate::model::{ExtendedState, RobotParams};
use crate::mpc::{estimate_flops_ip, estimate_flops_sqp, MpcConfig, SolverOptions};
use crate::safety::Obstacle;
use crate::sim::{first_deviation_step, run_closed_loop, Mode, NoiseConfig, Scenario, TrajectoryLog};

/// Lateral deviation that counts as leaving the start-goal line.
pub const DEVIATION_THRESHOLD: f64 = 0.05;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub seed: u64,
    pub scenario: ScenarioSection,
    pub obstacles: Option<Vec<Obstacle>>,
    pub robot: Option<RobotParams>,
    pub dfl: Option<DflGuard>,
    pub mpc: MpcSection,
    pub noise: NoiseSection,
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub initial: Option<ExtendedState>,
    pub goal: Option<[f64; 2]>,
    pub duration: Option<f64>,
    pub mode: Option<Mode>,
    pub substeps: Option<usize>,
    pub warm_start: Option<bool>,
    pub nmpc_input_bound: Option<[f64; 2]>,
}

/// A weight given either by its diagonal or in full.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Weight {
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl Weight {
    fn entries(&self, n: usize, key: &str) -> Result<Vec<f64>> {
        match self {
            Weight::Diagonal(d) if d.len() == n => {
                Ok((0..n * n).map(|i| if i / n == i % n { d[i / n] } else { 0.0 }).collect())
            }
            Weight::Full(rows) if rows.len() == n && rows.iter().all(|r| r.len() == n) => {
                Ok(rows.iter().flatten().copied().collect())
            }
            _ => Err(Error::config(key, format!("expected {n} diagonal entries or a {n}x{n} matrix"))),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcSection {
    pub horizon: Option<usize>,
    pub constraint_horizon: Option<usize>,
    pub gamma: Option<f64>,
    pub ts: Option<f64>,
    pub q: Option<Weight>,
    pub r: Option<Weight>,
    pub v_min: Option<[f64; 2]>,
    pub v_max: Option<[f64; 2]>,
    pub position_min: Option<[f64; 2]>,
    pub position_max: Option<[f64; 2]>,
    pub solver: Option<SolverSection>,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub opt_tol: Option<f64>,
    pub feas_tol: Option<f64>,
    pub max_iter: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub enabled: Option<bool>,
    pub variance: Option<f64>,
    pub mask: Option<[bool; 3]>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub gamma: Option<Vec<f64>>,
    pub horizon: Option<Vec<usize>>,
    pub mode: Option<Vec<Mode>>,
}

/// Parses a config document; type errors name the offending key.
pub fn parse_config(text: &str) -> Result<ConfigFile> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let key = if path == "." || path.is_empty() { "<root>".to_string() } else { path };
        Error::config(key, e.inner().to_string())
    })
}

pub fn load_config(path: &Path) -> Result<ConfigFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

fn v2(a: [f64; 2]) -> Vector2<f64> {
    Vector2::new(a[0], a[1])
}

impl ConfigFile {
    /// The scenario described by the file, before overrides and sweeps.
    pub fn scenario(&self) -> Result<Scenario> {
        let mut sc = Scenario::nominal();
        let s = &self.scenario;
        if let Some(x) = s.initial {
            if x.zeta < 0.0 {
                return Err(Error::config("scenario.initial.zeta", "must be nonnegative"));
            }
            sc.initial = x;
        }
        if let Some(g) = s.goal {
            sc.goal = v2(g);
        }
        if let Some(d) = s.duration {
            sc.duration = d;
        }
        if let Some(m) = s.mode {
            sc.mode = m;
        }
        if let Some(n) = s.substeps {
            sc.substeps = n;
        }
        if let Some(w) = s.warm_start {
            sc.warm_start = w;
        }
        if let Some(b) = s.nmpc_input_bound {
            if !(b[0] > 0.0 && b[1] > 0.0) {
                return Err(Error::config("scenario.nmpc_input_bound", "must be positive"));
            }
            sc.nmpc_input_bound = v2(b);
        }
        if let Some(o) = &self.obstacles {
            sc.obstacles = o.clone();
        }
        if let Some(r) = self.robot {
            sc.robot = r;
        }
        if let Some(g) = self.dfl {
            if !(g.zeta_threshold > 0.0) {
                return Err(Error::config("dfl.zeta_threshold", "must be positive"));
            }
            sc.guard = g;
        }
        sc.mpc = self.mpc_config()?;
        sc.noise = NoiseConfig {
            enabled: self.noise.enabled.unwrap_or(false),
            variance: self.noise.variance.unwrap_or(NoiseConfig::default().variance),
            seed: self.seed,
            mask: self.noise.mask.unwrap_or([true; 3]),
        };
        Ok(sc)
    }

    fn mpc_config(&self) -> Result<MpcConfig> {
        let m = &self.mpc;
        let mut c = MpcConfig::default();
        c.horizon = m.horizon.unwrap_or(c.horizon);
        c.constraint_horizon = m.constraint_horizon.unwrap_or(c.constraint_horizon);
        c.gamma = m.gamma.unwrap_or(c.gamma);
        c.ts = m.ts.unwrap_or(c.ts);
        if let Some(q) = &m.q {
            c.q = Matrix4::from_row_slice(&q.entries(4, "mpc.q")?);
        }
        if let Some(r) = &m.r {
            c.r = Matrix2::from_row_slice(&r.entries(2, "mpc.r")?);
        }
        c.v_min = m.v_min.map(v2).unwrap_or(c.v_min);
        c.v_max = m.v_max.map(v2).unwrap_or(c.v_max);
        c.position_min = m.position_min.map(v2).unwrap_or(c.position_min);
        c.position_max = m.position_max.map(v2).unwrap_or(c.position_max);
        if let Some(s) = m.solver {
            let d = SolverOptions::default();
            c.solver = SolverOptions {
                opt_tol: s.opt_tol.unwrap_or(d.opt_tol),
                feas_tol: s.feas_tol.unwrap_or(d.feas_tol),
                max_iter: s.max_iter.unwrap_or(d.max_iter),
            };
        }
        Ok(c)
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub gamma: Option<f64>,
    pub horizon: Option<usize>,
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub config: PathBuf,
    pub out_dir: PathBuf,
    pub overrides: Overrides,
    /// Expand the `sweep` section of the config.
    pub sweep: bool,
}

/// One scheduled closed-loop run.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub index: usize,
    pub label: String,
    pub scenario: Scenario,
}

/// Expands overrides and sweep axes into the list of runs.
pub fn plan_runs(cfg: &ConfigFile, ov: &Overrides, sweep: bool) -> Result<Vec<RunSpec>> {
    let mut base = cfg.scenario()?;
    if let Some(seed) = ov.seed {
        base.noise.seed = seed;
    }
    if let Some(g) = ov.gamma {
        if !(g > 0.0 && g <= 1.0) {
            return Err(Error::config("--gamma", "must lie in (0, 1]"));
        }
        base.mpc.gamma = g;
    }
    if let Some(n) = ov.horizon {
        if n == 0 {
            return Err(Error::config("--horizon", "must be at least 1"));
        }
        base.mpc.horizon = n;
    }
    if let Some(m) = ov.mode {
        base.mode = m;
    }
    base.validate()?;

    let (gammas, horizons, modes) = if sweep {
        let s = &cfg.sweep;
        (
            s.gamma.clone().unwrap_or_else(|| vec![base.mpc.gamma]),
            s.horizon.clone().unwrap_or_else(|| vec![base.mpc.horizon]),
            s.mode.clone().unwrap_or_else(|| vec![base.mode]),
        )
    } else {
        (vec![base.mpc.gamma], vec![base.mpc.horizon], vec![base.mode])
    };
    for (i, &g) in gammas.iter().enumerate() {
        if !(g > 0.0 && g <= 1.0) {
            return Err(Error::config(format!("sweep.gamma[{i}]"), "must lie in (0, 1]"));
        }
    }
    for (i, &n) in horizons.iter().enumerate() {
        if n == 0 {
            return Err(Error::config(format!("sweep.horizon[{i}]"), "must be at least 1"));
        }
    }
    if gammas.is_empty() || horizons.is_empty() || modes.is_empty() {
        return Err(Error::config("sweep", "axes must not be empty"));
    }

    let mut runs = Vec::new();
    for &mode in &modes {
        for &n in &horizons {
            for &g in &gammas {
                let index = runs.len();
                let mut sc = base.clone();
                sc.mode = mode;
                sc.mpc.horizon = n;
                sc.mpc.gamma = g;
                sc.stream = index as u64;
                sc.validate()?;
                let label = format!("run{index:03}_{}_N{n}_g{g}", mode.as_str());
                runs.push(RunSpec { index, label, scenario: sc });
            }
        }
    }
    Ok(runs)
}

pub fn csv_header(obstacles: usize) -> Vec<String> {
    let mut h: Vec<String> = ["t", "x1", "x2", "x3", "zeta", "u1", "u2", "omega_r", "omega_l", "v1", "v2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for i in 0..obstacles {
        h.push(format!("H{i}"));
        h.push(format!("dist{i}"));
    }
    h.extend(["cost", "sqp_iters", "solve_ms"].iter().map(|s| s.to_string()));
    h
}

/// Decimal with 16 significant digits.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.15e}")
}

pub fn write_csv<W: Write>(log: &TrajectoryLog, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(csv_header(log.obstacles.len()))?;
    for r in &log.records {
        let mut row = vec![
            fmt_float(r.t),
            fmt_float(r.state.x1),
            fmt_float(r.state.x2),
            fmt_float(r.state.x3),
            fmt_float(r.state.zeta),
            fmt_float(r.input.u1),
            fmt_float(r.input.u2),
            fmt_float(r.wheels.omega_r),
            fmt_float(r.wheels.omega_l),
            fmt_float(r.v.v1),
            fmt_float(r.v.v2),
        ];
        for (h, d) in r.barrier.iter().zip(&r.distance) {
            row.push(fmt_float(*h));
            row.push(fmt_float(*d));
        }
        row.push(fmt_float(r.cost));
        row.push(r.sqp_iterations.to_string());
        row.push(fmt_float(r.solve_time * 1e3));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
}

/// Nearest-rank percentiles.
pub fn percentiles(values: &[f64]) -> Percentiles {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let at = |p: f64| {
        if v.is_empty() {
            return f64::NAN;
        }
        let rank = ((p * v.len() as f64).ceil() as usize).clamp(1, v.len());
        v[rank - 1]
    };
    Percentiles { p50: at(0.5), p90: at(0.9), p99: at(0.99), max: at(1.0) }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub index: usize,
    pub file: String,
    pub mode: Mode,
    pub horizon: usize,
    pub gamma: f64,
    pub seed: u64,
    pub stream: u64,
    pub steps: usize,
    pub aborted_at: Option<usize>,
    pub min_distance: f64,
    pub final_position_error: f64,
    pub first_deviation_step: Option<usize>,
    /// Per-step solve time in milliseconds.
    pub solve_ms: Percentiles,
    pub mean_sqp_iterations: f64,
    pub max_sqp_iterations: usize,
    /// Mean inner iterations per SQP iteration, rounded up.
    pub inner_iterations: usize,
    pub flops_ip: f64,
    pub flops_sqp: f64,
}

impl RunSummary {
    pub fn from_log(spec: &RunSpec, file: String, log: &TrajectoryLog) -> Self {
        let sc = &spec.scenario;
        let times: Vec<f64> = log.records.iter().map(|r| r.solve_time * 1e3).collect();
        let sqp: Vec<usize> = log.records.iter().map(|r| r.sqp_iterations).collect();
        let total_sqp: usize = sqp.iter().sum();
        let total_qp: usize = log.records.iter().map(|r| r.qp_iterations).sum();
        let inner = if total_sqp == 0 { 0 } else { total_qp.div_ceil(total_sqp) };
        let max_sqp = sqp.iter().copied().max().unwrap_or(0);
        let n = sc.mpc.horizon;
        RunSummary {
            index: spec.index,
            file,
            mode: sc.mode,
            horizon: n,
            gamma: sc.mpc.gamma,
            seed: sc.noise.seed,
            stream: sc.stream,
            steps: log.summary.steps,
            aborted_at: log.summary.aborted_at,
            min_distance: log.summary.min_distance,
            final_position_error: log.summary.final_position_error,
            first_deviation_step: first_deviation_step(log, DEVIATION_THRESHOLD),
            solve_ms: percentiles(&times),
            mean_sqp_iterations: total_sqp as f64 / sqp.len().max(1) as f64,
            max_sqp_iterations: max_sqp,
            inner_iterations: inner,
            flops_ip: estimate_flops_ip(n, 2, inner),
            flops_sqp: estimate_flops_sqp(max_sqp, n, 2, inner),
        }
    }
}

/// Whether min clearance is nonincreasing in gamma for one (mode, N) group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityReport {
    pub mode: Mode,
    pub horizon: usize,
    /// `(gamma, min_distance)` sorted by gamma.
    pub points: Vec<(f64, f64)>,
    pub nonincreasing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationComparison {
    pub horizon: usize,
    pub gamma: f64,
    pub cbf_step: Option<usize>,
    pub euclid_step: Option<usize>,
    /// CBF leaves the line strictly first (never leaving counts as last).
    pub cbf_earlier: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub mode: Mode,
    pub horizon: usize,
    pub median_ms: f64,
    pub max_ms: f64,
    pub flops_ip: f64,
    pub flops_sqp: f64,
    /// Set for the linear scheme: every solve finished within one sample.
    pub within_sampling_time: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingTable {
    pub ts_ms: f64,
    pub rows: Vec<TimingRow>,
    /// Per horizon: nonlinear median above linear median.
    pub nmpc_slower: BTreeMap<usize, bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub config: String,
    pub runs: Vec<RunSummary>,
    pub monotonicity: Vec<MonotonicityReport>,
    pub deviation: Vec<DeviationComparison>,
    pub timing: TimingTable,
    pub all_succeeded: bool,
}

pub fn monotonicity(runs: &[RunSummary]) -> Vec<MonotonicityReport> {
    let mut groups: BTreeMap<(&'static str, usize), Vec<&RunSummary>> = BTreeMap::new();
    for r in runs {
        groups.entry((r.mode.as_str(), r.horizon)).or_default().push(r);
    }
    groups
        .into_values()
        .filter(|g| g.len() > 1)
        .map(|g| {
            let mut points: Vec<(f64, f64)> = g.iter().map(|r| (r.gamma, r.min_distance)).collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            let nonincreasing = points.windows(2).all(|w| w[1].1 <= w[0].1);
            MonotonicityReport { mode: g[0].mode, horizon: g[0].horizon, points, nonincreasing }
        })
        .collect()
}

pub fn deviation_comparisons(runs: &[RunSummary]) -> Vec<DeviationComparison> {
    let mut out = Vec::new();
    for c in runs.iter().filter(|r| r.mode == Mode::Cbf) {
        for e in runs.iter().filter(|r| r.mode == Mode::Euclid && r.horizon == c.horizon && r.gamma == c.gamma) {
            let later = |s: Option<usize>| s.unwrap_or(usize::MAX);
            out.push(DeviationComparison {
                horizon: c.horizon,
                gamma: c.gamma,
                cbf_step: c.first_deviation_step,
                euclid_step: e.first_deviation_step,
                cbf_earlier: later(c.first_deviation_step) < later(e.first_deviation_step),
            });
        }
    }
    out
}

/// Solve times (ms) and the largest flops estimates of one (mode, N) pool.
type TimingPool = (Mode, Vec<f64>, f64, f64);

/// Per-(mode, N) solve-time medians and maxima. Runs sharing mode and
/// horizon are pooled.
pub fn compare_timing(runs: &[RunSummary], logs: &[&TrajectoryLog], ts: f64) -> TimingTable {
    let mut pooled: BTreeMap<(&'static str, usize), TimingPool> = BTreeMap::new();
    for (r, log) in runs.iter().zip(logs) {
        let e = pooled.entry((r.mode.as_str(), r.horizon)).or_insert((r.mode, Vec::new(), 0.0, 0.0));
        e.1.extend(log.records.iter().map(|s| s.solve_time * 1e3));
        e.2 = e.2.max(r.flops_ip);
        e.3 = e.3.max(r.flops_sqp);
    }
    let rows: Vec<TimingRow> = pooled
        .into_iter()
        .map(|((_, horizon), (mode, times, flops_ip, flops_sqp))| {
            let p = percentiles(&times);
            TimingRow {
                mode,
                horizon,
                median_ms: p.p50,
                max_ms: p.max,
                flops_ip,
                flops_sqp,
                within_sampling_time: (mode == Mode::Cbf).then_some(p.max <= ts * 1e3),
            }
        })
        .collect();
    let mut nmpc_slower = BTreeMap::new();
    for c in rows.iter().filter(|r| r.mode == Mode::Cbf) {
        if let Some(nm) = rows.iter().find(|r| r.mode == Mode::Nmpc && r.horizon == c.horizon) {
            nmpc_slower.insert(c.horizon, nm.median_ms > c.median_ms);
        }
    }
    TimingTable { ts_ms: ts * 1e3, rows, nmpc_slower }
}

/// Minimum boundary distance and final error recomputed from a CSV file.
pub fn recompute_from_csv(path: &Path, goal: &Vector2<f64>) -> Result<(f64, f64)> {
    let mut rd = csv::Reader::from_path(path)?;
    let header = rd.headers()?.clone();
    let dist: Vec<usize> = header.iter().enumerate().filter(|(_, h)| h.starts_with("dist")).map(|(i, _)| i).collect();
    let mut min_d = f64::INFINITY;
    let mut last = (f64::NAN, f64::NAN);
    for rec in rd.records() {
        let rec = rec?;
        let num = |i: usize| rec[i].parse::<f64>().unwrap_or(f64::NAN);
        for &i in &dist {
            min_d = min_d.min(num(i));
        }
        last = (num(1), num(2));
    }
    Ok((min_d, (last.0 - goal[0]).hypot(last.1 - goal[1])))
}

/// Worker count from `SCMPC_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var("SCMPC_THREADS").ok()?.trim().parse().ok().filter(|&n: &usize| n > 0)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub summary: Summary,
    pub summary_path: PathBuf,
}

/// Executes every planned run, writes one CSV per run and `summary.json`.
pub fn run(manifest: &RunManifest) -> Result<RunOutcome> {
    let cfg = load_config(&manifest.config)?;
    let runs = plan_runs(&cfg, &manifest.overrides, manifest.sweep)?;
    fs::create_dir_all(&manifest.out_dir)
        .map_err(|e| Error::config("--out", format!("{}: {e}", manifest.out_dir.display())))?;

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap() {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Error::config("SCMPC_THREADS", e.to_string()))?;
    let logs: Vec<Result<TrajectoryLog>> =
        pool.install(|| runs.par_iter().map(|r| run_closed_loop(&r.scenario)).collect());

    let mut summaries = Vec::with_capacity(runs.len());
    let mut kept = Vec::with_capacity(runs.len());
    for (spec, log) in runs.iter().zip(logs) {
        let log = log?;
        let file = format!("{}.csv", spec.label);
        let f = fs::File::create(manifest.out_dir.join(&file))?;
        write_csv(&log, std::io::BufWriter::new(f))?;
        summaries.push(RunSummary::from_log(spec, file, &log));
        kept.push(log);
    }
    let ts = runs[0].scenario.mpc.ts;
    let refs: Vec<&TrajectoryLog> = kept.iter().collect();
    let all_succeeded = summaries.iter().all(|s| s.aborted_at.is_none());
    let summary = Summary {
        config: manifest.config.display().to_string(),
        monotonicity: monotonicity(&summaries),
        deviation: deviation_comparisons(&summaries),
        timing: compare_timing(&summaries, &refs, ts),
        runs: summaries,
        all_succeeded,
    };
    let summary_path = manifest.out_dir.join("summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;
    let exit_code = if all_succeeded { EXIT_OK } else { EXIT_INFEASIBLE };
    Ok(RunOutcome { exit_code, summary, summary_path })
}

pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => EXIT_CONFIG,
        Error::Infeasible { .. } => EXIT_INFEASIBLE,
        _ => EXIT_FAILURE,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        assert_eq!(
            csv_header(1).join(","),
            "t,x1,x2,x3,zeta,u1,u2,omega_r,omega_l,v1,v2,H0,dist0,cost,sqp_iters,solve_ms"
        );
        assert_eq!(csv_header(2)[11..15].join(","), "H0,dist0,H1,dist1");
    }

    #[test]
    fn float_format_keeps_sixteen_digits() {
        let s = fmt_float(std::f64::consts::PI);
        assert_eq!(s.parse::<f64>().unwrap(), std::f64::consts::PI);
        let mantissa = s.split('e').next().unwrap().replace(['.', '-'], "");
        assert!(mantissa.len() >= 12);
    }

    #[test]
    fn empty_config_is_nominal() {
        let cfg = parse_config("{}").unwrap();
        assert_eq!(cfg.scenario().unwrap(), Scenario::nominal());
    }

    #[test]
    fn type_errors_name_the_key() {
        let err = parse_config(r#"{"mpc": {"gamma": "high"}}"#).unwrap_err();
        match err {
            Error::Config { key, .. } => assert_eq!(key, "mpc.gamma"),
            e => panic!("unexpected {e}"),
        }
        let err = parse_config(r#"{"mpc": {"horizn": 3}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn range_errors_name_the_key() {
        let cfg = parse_config(r#"{"mpc": {"gamma": 1.5}}"#).unwrap();
        match plan_runs(&cfg, &Overrides::default(), false).unwrap_err() {
            Error::Config { key, .. } => assert_eq!(key, "mpc.gamma"),
            e => panic!("unexpected {e}"),
        }
        let cfg = parse_config(r#"{"sweep": {"gamma": [0.1, 0.0]}}"#).unwrap();
        match plan_runs(&cfg, &Overrides::default(), true).unwrap_err() {
            Error::Config { key, .. } => assert_eq!(key, "sweep.gamma[1]"),
            e => panic!("unexpected {e}"),
        }
        let cfg = parse_config(r#"{"mpc": {"q": [1, 1]}}"#).unwrap();
        assert!(matches!(cfg.scenario(), Err(Error::Config { key, .. }) if key == "mpc.q"));
    }

    #[test]
    fn sweep_expands_and_splits_streams() {
        let cfg = parse_config(
            r#"{"seed": 9, "sweep": {"gamma": [0.1, 0.5], "horizon": [8, 10], "mode": ["cbf", "euclid"]}}"#,
        )
        .unwrap();
        let runs = plan_runs(&cfg, &Overrides::default(), true).unwrap();
        assert_eq!(runs.len(), 8);
        for (i, r) in runs.iter().enumerate() {
            assert_eq!(r.scenario.stream, i as u64);
            assert_eq!(r.scenario.noise.seed, 9);
        }
        let single = plan_runs(&cfg, &Overrides { gamma: Some(0.3), ..Overrides::default() }, false).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].scenario.mpc.gamma, 0.3);
    }

    #[test]
    fn percentile_ranks() {
        let p = percentiles(&[5.0, 1.0, 3.0, 2.0, 4.0]);
        assert_eq!(p.p50, 3.0);
        assert_eq!(p.max, 5.0);
        assert_eq!(p.p90, 5.0);
    }
}
