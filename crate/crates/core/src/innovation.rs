//! Innovation statistics over fixed-length intervals.
//!
//! Under a correct measurement model the innovation is white with variance
//! `H P⁻ Hᵀ + r`. A biased OCV curve leaves a correlated component whose
//! sign between adjacent intervals is opposite to the curve error's sign.

use nalgebra::{Matrix2, RowVector2};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalInnovations {
    pub m: usize,
    pub values: Vec<f64>,
    /// Jacobian and prior covariance at the interval's last step.
    pub h_used: RowVector2<f64>,
    pub p_minus_last: Matrix2<f64>,
    pub r: f64,
}

impl IntervalInnovations {
    pub fn rms(&self) -> f64 {
        empirical_acm(self).sqrt()
    }

    pub fn theoretical_acm(&self) -> Result<f64> {
        theoretical_acm(&self.h_used, &self.p_minus_last, self.r)
    }
}

/// Sign of `g = actual - original` inferred from the CCM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorSign {
    PositiveG,
    NegativeG,
    Indeterminate,
}

impl ErrorSign {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorSign::PositiveG => "positive-g",
            ErrorSign::NegativeG => "negative-g",
            ErrorSign::Indeterminate => "indeterminate",
        }
    }
}

impl std::str::FromStr for ErrorSign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive-g" => Ok(ErrorSign::PositiveG),
            "negative-g" => Ok(ErrorSign::NegativeG),
            "indeterminate" => Ok(ErrorSign::Indeterminate),
            other => Err(Error::InvalidInput(format!("unknown verdict `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorSignVerdict {
    pub sign: ErrorSign,
    pub ccm_value: f64,
    pub acm_ratio: f64,
}

/// `(1/L) Σ prev[i]·curr[i]`: pairs samples at equal offsets in adjacent intervals.
pub fn interval_ccm(prev: &IntervalInnovations, curr: &IntervalInnovations) -> Result<f64> {
    ccm_values(&prev.values, &curr.values)
}

pub fn ccm_values(prev: &[f64], curr: &[f64]) -> Result<f64> {
    if prev.len() != curr.len() {
        return Err(Error::LengthMismatch { left: prev.len(), right: curr.len() });
    }
    if prev.is_empty() {
        return Err(Error::InvalidInput("empty interval".into()));
    }
    Ok(prev.iter().zip(curr).map(|(a, b)| a * b).sum::<f64>() / prev.len() as f64)
}

pub fn empirical_acm(curr: &IntervalInnovations) -> f64 {
    acm_values(&curr.values)
}

pub fn acm_values(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64
}

pub fn theoretical_acm(h: &RowVector2<f64>, p_minus: &Matrix2<f64>, r: f64) -> Result<f64> {
    let v = (h * p_minus * h.transpose())[(0, 0)] + r;
    if !(v >= 0.0) {
        return Err(Error::Degenerate(format!("theoretical ACM {v}")));
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CcmThreshold {
    pub abs_floor: f64,
    pub rel_to_acm: f64,
}

impl Default for CcmThreshold {
    fn default() -> Self {
        CcmThreshold { abs_floor: 1e-8, rel_to_acm: 0.05 }
    }
}

impl CcmThreshold {
    pub fn tau(&self, acm_emp: f64) -> f64 {
        self.abs_floor.max(self.rel_to_acm * acm_emp)
    }
}

/// A positive CCM points to a curve that sits above the cell's (`g < 0`).
pub fn infer_error_sign(ccm: f64, acm_ratio: f64, tau_ccm: f64) -> ErrorSignVerdict {
    let sign = if ccm > tau_ccm {
        ErrorSign::NegativeG
    } else if ccm < -tau_ccm {
        ErrorSign::PositiveG
    } else {
        ErrorSign::Indeterminate
    };
    ErrorSignVerdict { sign, ccm_value: ccm, acm_ratio }
}

/// Verdict for the pair `(prev, curr)` with the default threshold rule.
pub fn analyze_pair(
    prev: &IntervalInnovations,
    curr: &IntervalInnovations,
    th: &CcmThreshold,
) -> Result<ErrorSignVerdict> {
    let ccm = interval_ccm(prev, curr)?;
    let acm_emp = empirical_acm(curr);
    let theo = curr.theoretical_acm()?;
    let ratio = if theo > 0.0 { acm_emp / theo } else { f64::INFINITY };
    Ok(infer_error_sign(ccm, ratio, th.tau(acm_emp)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceConfig {
    pub window: usize,
    pub rho: f64,
    pub max_rel_change: f64,
    /// Rolling RMS at or below this counts as converged outright, which
    /// covers filters that start converged and so never decay.
    pub abs_floor: Option<f64>,
    /// Largest ratio of rolling empirical to rolling theoretical ACM that
    /// may count as converged, whichever rule above fired.
    pub max_acm_ratio: Option<f64>,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig { window: 3, rho: 0.2, max_rel_change: 0.1, abs_floor: None, max_acm_ratio: Some(1.5) }
    }
}

fn rolling_rms(history: &[IntervalInnovations], end: usize, window: usize) -> f64 {
    let start = end.saturating_sub(window - 1);
    let (sum, n) =
        history[start..=end].iter().flat_map(|i| i.values.iter()).fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

fn rolling_theoretical_acm(history: &[IntervalInnovations], end: usize, window: usize) -> Option<f64> {
    let start = end.saturating_sub(window - 1);
    let mut sum = 0.0;
    for i in &history[start..=end] {
        sum += i.theoretical_acm().ok()?;
    }
    Some(sum / (end + 1 - start) as f64)
}

/// Whether the latest interval of `history` counts as converged: the
/// rolling RMS over the last `window` intervals is below `rho` times the
/// first interval's RMS and moved less than `max_rel_change` since the
/// previous interval, or is under `abs_floor`. With `max_acm_ratio` set,
/// the rolling empirical ACM must also be consistent with the filter's own
/// covariance, which a filter still working off a large error is not.
pub fn detect_convergence(history: &[IntervalInnovations], cfg: &ConvergenceConfig) -> bool {
    if history.len() < 2 || cfg.window == 0 {
        return false;
    }
    let last = history.len() - 1;
    let now = rolling_rms(history, last, cfg.window);
    if let Some(max) = cfg.max_acm_ratio {
        match rolling_theoretical_acm(history, last, cfg.window) {
            Some(theo) if theo > 0.0 && now * now / theo <= max => {}
            _ => return false,
        }
    }
    if cfg.abs_floor.is_some_and(|floor| now <= floor) {
        return true;
    }
    let initial = history[0].rms();
    let before = rolling_rms(history, last - 1, cfg.window);
    let settled = before > 0.0 && ((now - before) / before).abs() < cfg.max_rel_change;
    now < cfg.rho * initial && settled
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn iv(values: Vec<f64>) -> IntervalInnovations {
        IntervalInnovations {
            m: 0,
            values,
            h_used: RowVector2::new(0.1, -1.0),
            p_minus_last: Matrix2::zeros(),
            r: 1e-6,
        }
    }

    #[test]
    fn ccm_cases() {
        assert_eq!(interval_ccm(&iv(vec![1.0; 8]), &iv(vec![1.0; 8])).unwrap(), 1.0);
        let alt: Vec<f64> = (0..8).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert_eq!(interval_ccm(&iv(alt), &iv(vec![1.0; 8])).unwrap(), 0.0);
        assert!(matches!(interval_ccm(&iv(vec![1.0; 3]), &iv(vec![1.0; 4])), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn acm_cases() {
        assert_eq!(empirical_acm(&iv(vec![0.0; 5])), 0.0);
        assert_eq!(empirical_acm(&iv(vec![2.0, -2.0])), 4.0);
        let h = RowVector2::new(0.0, -1.0);
        let p = Matrix2::new(0.01, 0.0, 0.0, 0.0004);
        assert!((theoretical_acm(&h, &p, 1e-4).unwrap() - 5e-4).abs() < 1e-15);
        assert_eq!(theoretical_acm(&h, &Matrix2::zeros(), 1e-4).unwrap(), 1e-4);
        let h = RowVector2::new(0.5, -1.0);
        let p = Matrix2::new(0.04, 0.0, 0.0, 0.0001);
        assert!((theoretical_acm(&h, &p, 0.0).unwrap() - 0.0101).abs() < 1e-15);
    }

    #[test]
    fn sign_rule() {
        assert_eq!(infer_error_sign(1e-4, 1.0, 1e-6).sign, ErrorSign::NegativeG);
        assert_eq!(infer_error_sign(-1e-4, 1.0, 1e-6).sign, ErrorSign::PositiveG);
        assert_eq!(infer_error_sign(0.0, 1.0, 1e-6).sign, ErrorSign::Indeterminate);
        assert_eq!(infer_error_sign(1e-6, 1.0, 1e-6).sign, ErrorSign::Indeterminate);
        let th = CcmThreshold::default();
        assert_eq!(th.tau(0.0), 1e-8);
        assert_eq!(th.tau(1e-4), 5e-6);
        for s in [ErrorSign::PositiveG, ErrorSign::NegativeG, ErrorSign::Indeterminate] {
            assert_eq!(s.as_str().parse::<ErrorSign>().unwrap(), s);
        }
    }

    #[test]
    fn convergence_on_decay() {
        // rms decays 4% per interval from 1; rho = 0.2 is crossed once 0.96^m < 0.2
        let cfg = ConvergenceConfig { window: 1, max_acm_ratio: None, ..ConvergenceConfig::default() };
        let mut hist = Vec::new();
        let mut first = None;
        for m in 0..80 {
            hist.push(iv(vec![0.96f64.powi(m); 10]));
            if first.is_none() && detect_convergence(&hist, &cfg) {
                first = Some(m);
            }
        }
        let crossing = (0..80).find(|&m| 0.96f64.powi(m) < 0.2).unwrap();
        assert_eq!(first, Some(crossing));
    }

    #[test]
    fn constant_large_innovations_never_converge() {
        let cfg = ConvergenceConfig { max_acm_ratio: None, ..ConvergenceConfig::default() };
        let mut hist = Vec::new();
        for _ in 0..50 {
            hist.push(iv(vec![0.05; 20]));
            assert!(!detect_convergence(&hist, &cfg));
        }
        assert!(!detect_convergence(&hist[..1], &cfg));
        let floored = ConvergenceConfig { abs_floor: Some(0.06), ..cfg };
        assert!(detect_convergence(&hist[..2], &floored));
    }

    #[test]
    fn acm_ratio_gates_convergence() {
        // theoretical ACM is r = 1e-6; an RMS of 1.5e-3 gives a ratio of 2.25
        let alt = |a: f64| -> Vec<f64> { (0..10).map(|i| if i % 2 == 0 { a } else { -a }).collect() };
        let cfg = ConvergenceConfig { window: 1, ..ConvergenceConfig::default() };
        let ungated = ConvergenceConfig { max_acm_ratio: None, ..cfg };
        let mut hist = vec![iv(alt(0.1)), iv(alt(1.5e-3)), iv(alt(1.5e-3))];
        assert!(detect_convergence(&hist, &ungated));
        assert!(!detect_convergence(&hist, &cfg));
        hist.push(iv(alt(1e-3)));
        hist.push(iv(alt(1e-3)));
        assert!(detect_convergence(&hist, &cfg));
    }

    proptest! {
        #[test]
        fn ccm_symmetric_and_bilinear(v in prop::collection::vec(-1.0f64..1.0, 20), w in prop::collection::vec(-1.0f64..1.0, 20), c in -4.0f64..4.0) {
            let a = iv(v.clone());
            let b = iv(w.clone());
            prop_assert_eq!(interval_ccm(&a, &b).unwrap(), interval_ccm(&b, &a).unwrap());
            let scaled = iv(v.iter().map(|x| x * c).collect());
            let lhs = interval_ccm(&scaled, &b).unwrap();
            let rhs = c * interval_ccm(&a, &b).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-15 * (1.0 + rhs.abs()));
            prop_assert!(empirical_acm(&a) >= 0.0);
            prop_assert_eq!(empirical_acm(&a), interval_ccm(&a, &a).unwrap());
        }
    }
}
