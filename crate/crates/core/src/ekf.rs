//! Extended Kalman filter over the state `[soc, up]`.
//!
//! Used on its own as the baseline estimator and as the member type of the
//! multi-model bank, where each member carries a fixed measurement slope and
//! an affine measurement model anchored at the interval start.

use std::sync::Arc;

use nalgebra::{Matrix2, RowVector2, Vector2};

use crate::ecm::{clamp_soc, propagate, BatteryState, EcmParams, SimConfig, SocClamp, Trace};
use crate::error::{ensure_finite, Error, Result};
use crate::osc::OscCurve;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseConfig {
    pub q: Matrix2<f64>,
    pub r: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { q: Matrix2::new(1e-10, 0.0, 0.0, 1e-9), r: 4e-6 }
    }
}

impl NoiseConfig {
    pub fn diagonal(q00: f64, q11: f64, r: f64) -> Result<Self> {
        let n = NoiseConfig { q: Matrix2::new(q00, 0.0, 0.0, q11), r };
        n.validate()?;
        Ok(n)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0) || !self.r.is_finite() {
            return Err(Error::InvalidInput(format!("r must be positive, got {}", self.r)));
        }
        if self.q.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("q is not finite".into()));
        }
        if (self.q[(0, 1)] - self.q[(1, 0)]).abs() > 1e-15 {
            return Err(Error::InvalidInput("q is not symmetric".into()));
        }
        let det = self.q[(0, 0)] * self.q[(1, 1)] - self.q[(0, 1)] * self.q[(1, 0)];
        if self.q[(0, 0)] < 0.0 || self.q[(1, 1)] < 0.0 || det < -1e-30 {
            return Err(Error::InvalidInput("q is not positive semidefinite".into()));
        }
        Ok(())
    }
}

/// Expansion point of an affine measurement model: the interval's starting
/// posterior and the OCV assigned to it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub state: BatteryState,
    pub ocv: f64,
}

#[derive(Debug, Clone)]
pub struct KfState {
    pub x: BatteryState,
    pub p: Matrix2<f64>,
    pub noise: NoiseConfig,
    pub curve: Arc<OscCurve>,
    pub slope_override: Option<f64>,
    /// With an override slope, predicts `ocv + slope * (soc - anchor.soc) - up`
    /// instead of reading the curve.
    pub anchor: Option<Anchor>,
}

/// Everything one filter step produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub prior: (BatteryState, Matrix2<f64>),
    pub posterior: (BatteryState, Matrix2<f64>),
    pub innovation: f64,
    pub innovation_variance: f64,
    pub gain: Vector2<f64>,
    pub h: RowVector2<f64>,
    /// Predicted terminal voltage, `y - innovation`.
    pub predicted_voltage: f64,
    pub clamp: Option<SocClamp>,
}

/// Circuit parameters per step, either fixed or from an identification stream.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamSchedule {
    Constant(EcmParams),
    PerStep(Vec<EcmParams>),
}

impl ParamSchedule {
    pub fn at(&self, k: usize) -> &EcmParams {
        match self {
            ParamSchedule::Constant(p) => p,
            ParamSchedule::PerStep(v) => &v[k],
        }
    }

    pub fn check_len(&self, n: usize) -> Result<()> {
        match self {
            ParamSchedule::PerStep(v) if v.len() != n => Err(Error::LengthMismatch { left: v.len(), right: n }),
            _ => Ok(()),
        }
    }
}

impl KfState {
    pub fn new(x: BatteryState, p: Matrix2<f64>, noise: NoiseConfig, curve: Arc<OscCurve>) -> Self {
        KfState { x, p, noise, curve, slope_override: None, anchor: None }
    }

    fn affine(&self) -> Option<(f64, Anchor)> {
        match (self.slope_override, self.anchor) {
            (Some(s), Some(a)) => Some((s, a)),
            _ => None,
        }
    }

    /// Prior state and covariance; the prior SOC is clamped like the simulator's.
    pub fn predict(&self, params: &EcmParams, current: f64, cfg: &SimConfig) -> Result<(BatteryState, Matrix2<f64>)> {
        ensure_finite("current", current)?;
        let decay = params.decay(cfg.dt);
        let f = Matrix2::new(1.0, 0.0, 0.0, decay);
        let next = propagate(self.x, params, current, cfg);
        let (soc, _) = clamp_soc(next.soc);
        let p = f * self.p * f.transpose() + self.noise.q;
        Ok((BatteryState { soc, up: next.up }, p))
    }

    pub fn measurement_jacobian(&self, soc_prior: f64) -> Result<RowVector2<f64>> {
        let slope = match self.slope_override {
            Some(s) => s,
            None => self.curve.slope(soc_prior)?,
        };
        Ok(RowVector2::new(slope, -1.0))
    }

    /// Predicted terminal voltage `h(x⁻) + D u` with `D = -r0`.
    pub fn predicted_measurement(&self, prior: &BatteryState, current: f64, params: &EcmParams) -> Result<f64> {
        let ocv = match self.affine() {
            Some((s, a)) => a.ocv + s * (prior.soc - a.state.soc),
            None => self.curve.ocv(prior.soc)?,
        };
        Ok(ocv - prior.up - params.r0 * current)
    }

    pub fn update(
        &self,
        prior: (BatteryState, Matrix2<f64>),
        measured_ut: f64,
        current: f64,
        params: &EcmParams,
    ) -> Result<StepOutput> {
        ensure_finite("voltage", measured_ut)?;
        let (xm, pm) = prior;
        let h = self.measurement_jacobian(xm.soc)?;
        let predicted = self.predicted_measurement(&xm, current, params)?;
        let innovation = measured_ut - predicted;
        let s = (h * pm * h.transpose())[(0, 0)] + self.noise.r;
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Degenerate(format!("innovation variance {s}")));
        }
        let gain = pm * h.transpose() / s;
        let soc = xm.soc + gain[0] * innovation;
        let up = xm.up + gain[1] * innovation;
        let (soc, clamp) = clamp_soc(soc);
        let p = (Matrix2::identity() - gain * h) * pm;
        let p = 0.5 * (p + p.transpose());
        ensure_finite("posterior soc", soc)?;
        Ok(StepOutput {
            prior,
            posterior: (BatteryState { soc, up }, p),
            innovation,
            innovation_variance: s,
            gain,
            h,
            predicted_voltage: predicted,
            clamp,
        })
    }

    /// Predict (unless `first`) then update, committing the posterior.
    pub(crate) fn advance(
        &mut self,
        first: bool,
        prev: Option<(f64, &EcmParams)>,
        measured_ut: f64,
        current: f64,
        params: &EcmParams,
        cfg: &SimConfig,
    ) -> Result<StepOutput> {
        let prior = match (first, prev) {
            (false, Some((i, pp))) => self.predict(pp, i, cfg)?,
            _ => (self.x, self.p),
        };
        let out = self.update(prior, measured_ut, current, params)?;
        self.x = out.posterior.0;
        self.p = out.posterior.1;
        Ok(out)
    }
}

pub(crate) fn check_dt(trace: &Trace, cfg: &SimConfig) -> Result<()> {
    if (trace.dt - cfg.dt).abs() > 1e-9 * cfg.dt {
        return Err(Error::InvalidInput(format!("trace dt {} differs from model dt {}", trace.dt, cfg.dt)));
    }
    Ok(())
}

/// Runs one filter over the whole trace. The initial state is the estimate
/// for sample 0, so the first step is a measurement update only; every later
/// step predicts with the previous sample's current and parameters.
pub fn run_ekf(initial: KfState, params: &ParamSchedule, trace: &Trace, cfg: &SimConfig) -> Result<Vec<StepOutput>> {
    initial.noise.validate()?;
    params.check_len(trace.len())?;
    check_dt(trace, cfg)?;
    let mut kf = initial;
    let mut out = Vec::with_capacity(trace.len());
    for (k, s) in trace.samples.iter().enumerate() {
        let prev = (k > 0).then(|| (trace.samples[k - 1].current, params.at(k - 1)));
        let step = kf.advance(k == 0, prev, s.voltage, s.current, params.at(k), cfg).map_err(|e| e.at_step(k))?;
        out.push(step);
    }
    Ok(out)
}
