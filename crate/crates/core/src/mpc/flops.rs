//! Worst-case floating point operation counts used for the complexity
//! comparison between the linear and nonlinear formulations.

/// Interior-point estimate `i_ip * (2/3 (N m)^3 + 2 (N m)^2)`.
pub fn estimate_flops_ip(horizon: usize, inputs: usize, ip_iterations: usize) -> f64 {
    let nm = (horizon * inputs) as f64;
    ip_iterations as f64 * (2.0 / 3.0 * nm.powi(3) + 2.0 * nm * nm)
}

/// SQP estimate: one interior-point solve per major iteration.
pub fn estimate_flops_sqp(sqp_iterations: usize, horizon: usize, inputs: usize, ip_iterations: usize) -> f64 {
    sqp_iterations as f64 * estimate_flops_ip(horizon, inputs, ip_iterations)
}
