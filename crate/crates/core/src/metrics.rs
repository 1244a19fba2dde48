//! Error metrics for SOC traces.

use crate::error::{Error, Result};

/// Error level the estimate must stay under to count as converged.
pub const CONVERGENCE_BAND: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    pub max_abs_error: f64,
    /// Time after which `|error| < 5%` holds to the end; `None` if it never does.
    pub convergence_time_s: Option<f64>,
    pub final_quarter_rmse: f64,
}

fn rmse(e: &[f64]) -> f64 {
    (e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64).sqrt()
}

pub fn compute_metrics(est: &[f64], truth: &[f64], dt: f64) -> Result<Metrics> {
    if est.len() != truth.len() {
        return Err(Error::LengthMismatch { left: est.len(), right: truth.len() });
    }
    if est.is_empty() {
        return Err(Error::InvalidInput("empty SOC trace".into()));
    }
    let e: Vec<f64> = est.iter().zip(truth).map(|(a, b)| a - b).collect();
    let n = e.len();
    let mae = e.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    let max_abs_error = e.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let convergence_time_s = match e.iter().rposition(|v| v.abs() >= CONVERGENCE_BAND) {
        None => Some(0.0),
        Some(k) if k + 1 < n => Some((k + 1) as f64 * dt),
        Some(_) => None,
    };
    let quarter = n.div_ceil(4);
    Ok(Metrics { rmse: rmse(&e), mae, max_abs_error, convergence_time_s, final_quarter_rmse: rmse(&e[n - quarter..]) })
}
