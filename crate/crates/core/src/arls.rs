//! Circuit identification by recursive least squares with an SOC-driven
//! forgetting factor.
//!
//! Differencing the discrete model twice gives
//! `ΔUt(k) = θ₁ ΔUt(k-1) + θ₂ ΔI(k) + θ₃ ΔI(k-1)` with
//! `θ = [exp(-dt/τ), -R0, θ₁R0 - (1 - θ₁)Rp]`, up to the OCV change between
//! samples, which is negligible where the curve is flat.

use nalgebra::{Matrix3, RowVector3, Vector3};

use crate::ecm::{EcmParams, Trace};
use crate::error::{ensure_finite, Error, Result};

pub const DEFAULT_THETA0: [f64; 3] = [0.99, -0.05, 0.04];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressorSample {
    pub a_row: RowVector3<f64>,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorState {
    pub theta: Vector3<f64>,
    pub p: Matrix3<f64>,
    pub a: f64,
    pub prev_ut: Option<f64>,
    pub prev_il: Option<f64>,
    /// Posterior SOC at `k - 1` and `k - 2`.
    pub soc_feedback: Option<(f64, f64)>,
}

impl RegressorState {
    pub fn new(theta0: Vector3<f64>, p0: Matrix3<f64>, a: f64) -> Self {
        RegressorState { theta: theta0, p: p0, a, prev_ut: None, prev_il: None, soc_feedback: None }
    }

    /// Symmetric to 1e-9 and strictly positive eigenvalues.
    pub fn covariance_ok(&self) -> bool {
        if (self.p - self.p.transpose()).abs().max() > 1e-9 {
            return false;
        }
        let sym = 0.5 * (self.p + self.p.transpose());
        sym.symmetric_eigenvalues().iter().all(|&e| e > 0.0)
    }
}

pub fn build_sample(
    ut_k: f64,
    ut_km1: f64,
    ut_km2: f64,
    il_k: f64,
    il_km1: f64,
    il_km2: f64,
) -> Result<RegressorSample> {
    for (n, v) in
        [("ut_k", ut_k), ("ut_km1", ut_km1), ("ut_km2", ut_km2), ("il_k", il_k), ("il_km1", il_km1), ("il_km2", il_km2)]
    {
        ensure_finite(n, v)?;
    }
    Ok(RegressorSample { a_row: RowVector3::new(ut_km1 - ut_km2, il_k - il_km1, il_km1 - il_km2), y: ut_k - ut_km1 })
}

pub const DEFAULT_LAMBDA_MIN: f64 = 0.95;
pub const SOC_EPSILON: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForgettingFactor {
    pub lambda: f64,
    /// The SOC ratio denominator was too small to trust.
    pub degenerate: bool,
}

/// `λ = 1 - a·|soc(k-1) - ½|·soc(k-1)/soc(k-2)`, clamped to `[lambda_min, 1]`.
pub fn forgetting_factor(soc_km1: f64, soc_km2: f64, a: f64, lambda_min: f64) -> ForgettingFactor {
    if !(soc_km2 > SOC_EPSILON) || !soc_km1.is_finite() || !a.is_finite() {
        return ForgettingFactor { lambda: lambda_min, degenerate: true };
    }
    let raw = 1.0 - a * (soc_km1 - 0.5).abs() * soc_km1 / soc_km2;
    ForgettingFactor { lambda: raw.clamp(lambda_min, 1.0), degenerate: false }
}

pub fn arls_step(state: &RegressorState, sample: &RegressorSample, lambda: f64) -> Result<RegressorState> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::InvalidInput(format!("forgetting factor {lambda} outside (0, 1]")));
    }
    let a = sample.a_row;
    let pa = state.p * a.transpose();
    let denom = lambda + (a * pa)[(0, 0)];
    if !(denom.abs() >= 1e-15) {
        return Err(Error::Degenerate(format!("RLS denominator {denom}")));
    }
    let k = pa / denom;
    let residual = sample.y - (a * state.theta)[(0, 0)];
    let theta = state.theta + k * residual;
    let p = (Matrix3::identity() - k * a) * state.p / lambda;
    let p = 0.5 * (p + p.transpose());
    Ok(RegressorState { theta, p, ..state.clone() })
}

pub fn circuit_to_theta(params: &EcmParams, dt: f64) -> Vector3<f64> {
    let t1 = params.decay(dt);
    Vector3::new(t1, -params.r0, t1 * params.r0 - (1.0 - t1) * params.rp)
}

pub fn theta_to_circuit(theta: &Vector3<f64>, dt: f64) -> Result<EcmParams> {
    let (t1, t2, t3) = (theta[0], theta[1], theta[2]);
    if !(t1 > 0.0 && t1 < 1.0) {
        return Err(Error::NonPhysical(format!("theta1 = {t1} gives no time constant")));
    }
    let m = t1 * t2 + t3;
    if m == 0.0 || !m.is_finite() {
        return Err(Error::NonPhysical(format!("theta1*theta2 + theta3 = {m}")));
    }
    let r0 = -t2;
    let rp = m / (t1 - 1.0);
    let cp = (1.0 - t1) * dt / (t1.ln() * m);
    for (name, v) in [("r0", r0), ("rp", rp), ("cp", cp)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::NonPhysical(format!("{name} = {v}")));
        }
    }
    Ok(EcmParams { r0, rp, cp })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArlsConfig {
    pub a: f64,
    pub lambda_min: f64,
    /// Forgetting factor used when no SOC feedback is supplied.
    pub lambda_const: f64,
    pub p0: f64,
    pub theta0: [f64; 3],
    pub warmup: usize,
    /// Only update while the fed-back SOC lies in `[0.2, 0.8]`.
    pub plateau_only_identification: bool,
    pub dt: f64,
}

impl Default for ArlsConfig {
    fn default() -> Self {
        ArlsConfig {
            a: 0.1,
            lambda_min: DEFAULT_LAMBDA_MIN,
            lambda_const: 0.999,
            p0: 1e3,
            theta0: DEFAULT_THETA0,
            warmup: 100,
            plateau_only_identification: false,
            dt: 1.0,
        }
    }
}

impl ArlsConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.a >= 0.0) || !self.a.is_finite() {
            return bad(format!("a_ff must be finite and >= 0, got {}", self.a));
        }
        if !(self.lambda_min > 0.0 && self.lambda_min <= 1.0) {
            return bad(format!("lambda_min must lie in (0, 1], got {}", self.lambda_min));
        }
        if !(self.lambda_const > 0.0 && self.lambda_const <= 1.0) {
            return bad(format!("lambda_const must lie in (0, 1], got {}", self.lambda_const));
        }
        if !(self.p0 > 0.0) || !self.p0.is_finite() {
            return bad(format!("p0 must be positive, got {}", self.p0));
        }
        if !(self.dt > 0.0) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        Ok(())
    }

    pub fn initial_state(&self) -> RegressorState {
        RegressorState::new(Vector3::from(self.theta0), Matrix3::identity() * self.p0, self.a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepStatus {
    /// The regressor carried information and the estimate moved.
    Updated,
    /// Regressor was zero; nothing to learn from this sample.
    NoExcitation,
    /// Plateau-only mode and the SOC was outside the plateau.
    Frozen,
    /// Not enough history for a second difference yet.
    Priming,
    /// The update was numerically degenerate; the state was kept.
    Gap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentifyStep {
    pub t: f64,
    /// `None` before warmup ends or before any extraction succeeded.
    pub params: Option<EcmParams>,
    pub lambda: f64,
    pub status: StepStatus,
    /// Extraction failed on this step and `params` holds an older value.
    pub held: bool,
    pub p_trace: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentifyResult {
    pub steps: Vec<IdentifyStep>,
    pub final_state: RegressorState,
    /// Covariance never shrank: the input did not excite the model.
    pub unidentifiable: bool,
}

impl IdentifyResult {
    pub fn last_params(&self) -> Option<EcmParams> {
        self.steps.iter().rev().find_map(|s| s.params)
    }
}

/// Runs the estimator over a whole trace. `soc_feedback[k]` is the
/// posterior SOC at sample `k`; without it the forgetting factor is fixed.
pub fn identify_stream(trace: &Trace, soc_feedback: Option<&[f64]>, cfg: &ArlsConfig) -> Result<IdentifyResult> {
    cfg.validate()?;
    if let Some(f) = soc_feedback {
        if f.len() != trace.len() {
            return Err(Error::LengthMismatch { left: f.len(), right: trace.len() });
        }
    }
    let mut state = cfg.initial_state();
    let p_start = state.p.trace();
    let mut min_trace = p_start;
    let mut last_valid: Option<EcmParams> = None;
    let mut steps = Vec::with_capacity(trace.len());
    let s = &trace.samples;
    for k in 0..s.len() {
        let lambda = match (soc_feedback, k) {
            (Some(f), k) if k >= 2 => forgetting_factor(f[k - 1], f[k - 2], cfg.a, cfg.lambda_min).lambda,
            (Some(_), _) => 1.0,
            (None, _) => cfg.lambda_const,
        };
        let status = if k < 2 {
            StepStatus::Priming
        } else if cfg.plateau_only_identification && soc_feedback.is_some_and(|f| !(0.2..=0.8).contains(&f[k - 1])) {
            StepStatus::Frozen
        } else {
            let sample = build_sample(
                s[k].voltage,
                s[k - 1].voltage,
                s[k - 2].voltage,
                s[k].current,
                s[k - 1].current,
                s[k - 2].current,
            )
            .map_err(|e| e.at_step(k))?;
            if sample.a_row.amax() < 1e-12 {
                StepStatus::NoExcitation
            } else {
                match arls_step(&state, &sample, lambda) {
                    Ok(next) if next.theta.iter().all(|v| v.is_finite()) => {
                        state = next;
                        StepStatus::Updated
                    }
                    Ok(_) | Err(Error::Degenerate(_)) => StepStatus::Gap,
                    Err(e) => return Err(e.at_step(k)),
                }
            }
        };
        state.prev_ut = Some(s[k].voltage);
        state.prev_il = Some(s[k].current);
        if let Some(f) = soc_feedback {
            state.soc_feedback = Some((f[k], if k > 0 { f[k - 1] } else { f[k] }));
        }
        let tr = state.p.trace();
        min_trace = min_trace.min(tr);

        let mut held = false;
        let params = if k + 1 >= cfg.warmup {
            match theta_to_circuit(&state.theta, cfg.dt) {
                Ok(p) => {
                    last_valid = Some(p);
                    Some(p)
                }
                Err(_) => {
                    held = true;
                    last_valid
                }
            }
        } else {
            None
        };
        steps.push(IdentifyStep { t: s[k].t, params, lambda, status, held, p_trace: tr });
    }
    let unidentifiable = min_trace > 0.5 * p_start;
    Ok(IdentifyResult { steps, final_state: state, unidentifiable })
}
