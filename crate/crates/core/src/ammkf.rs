//! Adaptive multi-model Kalman filter.
//!
//! Phase 1 runs one EKF on the original curve until its innovations settle.
//! From then on every interval of `L` samples gets a fresh bank of filters
//! that share the handed-off state but use different fixed measurement
//! slopes around the original curve's slope. The bank is skewed up or down
//! according to the sign the innovation CCM gives for the curve error.
//! Gaussian likelihoods of each filter's predicted voltage drive Bayes
//! updates of the model probabilities, and the most probable filter hands
//! its state to the next interval. Its affine measurement models, laid end
//! to end, form the corrected OCV curve.

use std::ops::Range;
use std::sync::Arc;

use nalgebra::Matrix2;
use rayon::prelude::*;

use crate::ecm::{BatteryState, SimConfig, Trace};
use crate::ekf::{check_dt, Anchor, KfState, ParamSchedule, StepOutput};
use crate::error::{Error, Result};
use crate::innovation::{
    analyze_pair, detect_convergence, CcmThreshold, ConvergenceConfig, ErrorSign, ErrorSignVerdict, IntervalInnovations,
};
use crate::osc::OscCurve;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Charge,
    Discharge,
}

/// Where each interval's affine measurement model starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorMode {
    /// Continue from the previous interval's optimal model, so curve
    /// corrections accumulate.
    Chained,
    /// Restart on the original curve at the handed-off SOC.
    Original,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankConfig {
    pub n: usize,
    pub interval_len: usize,
    pub spread: f64,
    pub slope_floor: f64,
    pub prob_floor: f64,
    pub ccm: CcmThreshold,
    pub convergence: ConvergenceConfig,
    /// Adds an absolute convergence level of this many measurement sigmas
    /// (`sqrt(r)`) unless `convergence.abs_floor` is already set; 0 disables it.
    pub convergence_floor_sigmas: f64,
    pub anchor: AnchorMode,
    pub parallel: bool,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig {
            n: 7,
            interval_len: 50,
            spread: 2.0,
            slope_floor: 1e-4,
            prob_floor: 1e-6,
            ccm: CcmThreshold::default(),
            convergence: ConvergenceConfig::default(),
            convergence_floor_sigmas: 3.0,
            anchor: AnchorMode::Chained,
            parallel: true,
        }
    }
}

impl BankConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n % 2 != 1 {
            return bad(format!("n must be odd, got {}", self.n));
        }
        if self.interval_len < 5 {
            return bad(format!("interval_len must be >= 5, got {}", self.interval_len));
        }
        if !(self.spread > 1.0) || !self.spread.is_finite() {
            return bad(format!("spread must exceed 1, got {}", self.spread));
        }
        if !(self.slope_floor > 0.0) {
            return bad(format!("slope_floor must be positive, got {}", self.slope_floor));
        }
        if !(self.prob_floor >= 0.0 && self.prob_floor * (self.n as f64) < 1.0) {
            return bad(format!("prob_floor {} leaves no room for n = {}", self.prob_floor, self.n));
        }
        if self.convergence.window == 0 {
            return bad("convergence window must be >= 1".into());
        }
        Ok(())
    }
}

/// Slopes for the next interval's bank, geometrically spaced.
///
/// Discharge with `g < 0` (and charge with `g > 0`) spans `[base, base·spread]`;
/// the opposite cases span `[base/spread, base]`; no verdict spans
/// `[base/spread, base·spread]`. The base is floored before spreading so it
/// is always a member.
pub fn build_slope_set(base_slope: f64, sign: ErrorSign, mode: Mode, cfg: &BankConfig) -> Vec<f64> {
    let base = base_slope.max(cfg.slope_floor);
    let n = cfg.n;
    if n == 1 {
        return vec![base];
    }
    let up = matches!((sign, mode), (ErrorSign::NegativeG, Mode::Discharge) | (ErrorSign::PositiveG, Mode::Charge));
    let down = matches!((sign, mode), (ErrorSign::PositiveG, Mode::Discharge) | (ErrorSign::NegativeG, Mode::Charge));
    (0..n)
        .map(|i| {
            let f = i as f64 / (n - 1) as f64;
            let e = if up {
                f
            } else if down {
                f - 1.0
            } else {
                2.0 * f - 1.0
            };
            // the base member is kept bit for bit
            let s = if e == 0.0 { base } else { base * cfg.spread.powf(e) };
            s.max(cfg.slope_floor)
        })
        .collect()
}

/// Mean of the affine measurement model `H x⁻ + (h(x₀) - H x₀) + D u`.
pub fn predicted_measurement_mean(
    filter: &KfState,
    prior: &BatteryState,
    anchor: &Anchor,
    current: f64,
    params: &crate::ecm::EcmParams,
) -> Result<f64> {
    let slope = match filter.slope_override {
        Some(s) => s,
        None => filter.curve.slope(anchor.state.soc)?,
    };
    Ok(anchor.ocv + slope * (prior.soc - anchor.state.soc) - prior.up - params.r0 * current)
}

pub fn likelihood(y: f64, mean: f64, s: f64) -> Result<f64> {
    Ok(log_likelihood(y, mean, s)?.exp())
}

pub fn log_likelihood(y: f64, mean: f64, s: f64) -> Result<f64> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Degenerate(format!("likelihood variance {s}")));
    }
    let d = y - mean;
    Ok(-0.5 * (2.0 * std::f64::consts::PI * s).ln() - d * d / (2.0 * s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityUpdate {
    pub probs: Vec<f64>,
    /// Every product underflowed and the vector was reset to uniform.
    pub reset: bool,
}

/// Bayes update `p ∝ p·density`, then `floor` applied without breaking the simplex.
pub fn update_probabilities(probs: &[f64], densities: &[f64], floor: f64) -> Result<ProbabilityUpdate> {
    if probs.len() != densities.len() {
        return Err(Error::LengthMismatch { left: probs.len(), right: densities.len() });
    }
    if densities.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
        return Err(Error::InvalidInput("densities must be finite and non-negative".into()));
    }
    let raw: Vec<f64> = probs.iter().zip(densities).map(|(p, d)| p * d).collect();
    Ok(normalize(raw, floor))
}

/// Same as [`update_probabilities`] with log densities, shifted by their
/// maximum first so that tiny variances do not underflow.
pub fn update_probabilities_log(probs: &[f64], log_densities: &[f64], floor: f64) -> Result<ProbabilityUpdate> {
    if probs.len() != log_densities.len() {
        return Err(Error::LengthMismatch { left: probs.len(), right: log_densities.len() });
    }
    let max = log_densities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        log::warn!("all model likelihoods vanished; probabilities reset to uniform");
        return Ok(ProbabilityUpdate { probs: uniform(probs.len()), reset: true });
    }
    let raw: Vec<f64> = probs.iter().zip(log_densities).map(|(p, l)| p * (l - max).exp()).collect();
    Ok(normalize(raw, floor))
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

fn normalize(raw: Vec<f64>, floor: f64) -> ProbabilityUpdate {
    let n = raw.len();
    let sum: f64 = raw.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        log::warn!("model probabilities underflowed; reset to uniform");
        return ProbabilityUpdate { probs: uniform(n), reset: true };
    }
    let mut p: Vec<f64> = raw.iter().map(|v| v / sum).collect();
    apply_floor(&mut p, floor);
    ProbabilityUpdate { probs: p, reset: false }
}

/// Raises entries below `floor` to it and rescales the rest so the total stays 1.
fn apply_floor(p: &mut [f64], floor: f64) {
    if floor <= 0.0 {
        return;
    }
    let mut pinned = vec![false; p.len()];
    loop {
        let mut changed = false;
        for (v, pin) in p.iter().zip(pinned.iter_mut()) {
            if !*pin && *v < floor {
                *pin = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let n_pinned = pinned.iter().filter(|&&x| x).count() as f64;
        let free_mass: f64 = p.iter().zip(&pinned).filter(|(_, &x)| !x).map(|(v, _)| v).sum();
        let target = 1.0 - n_pinned * floor;
        for (v, &pin) in p.iter_mut().zip(&pinned) {
            *v = if pin { floor } else { *v * target / free_mass };
        }
    }
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax_lowest(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct FilterBank {
    pub filters: Vec<KfState>,
    pub probabilities: Vec<f64>,
    pub interval_index: usize,
    /// Innovations of each filter in the current interval.
    pub innovations: Vec<Vec<f64>>,
}

impl FilterBank {
    /// All members start from `base` and differ only in their slope.
    pub fn new(base: &KfState, slopes: &[f64], anchor: Anchor, interval_index: usize) -> Self {
        let filters: Vec<KfState> =
            slopes.iter().map(|&s| KfState { slope_override: Some(s), anchor: Some(anchor), ..base.clone() }).collect();
        Self::from_filters(filters, interval_index)
    }

    pub fn from_filters(filters: Vec<KfState>, interval_index: usize) -> Self {
        let n = filters.len();
        FilterBank { filters, probabilities: uniform(n), interval_index, innovations: vec![Vec::new(); n] }
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct IntervalResult {
    pub optimal_index: usize,
    pub soc_trace: Vec<f64>,
    pub corrected_osc_points: Vec<(f64, f64)>,
    pub final_state: (BatteryState, Matrix2<f64>),
    /// Step outputs of the optimal filter.
    pub outputs: Vec<StepOutput>,
    pub probabilities: Vec<f64>,
    /// Probability vector after every step.
    pub probability_history: Vec<Vec<f64>>,
    pub underflow_resets: usize,
}

fn step_filter(
    kf: &mut KfState,
    trace: &Trace,
    range: Range<usize>,
    params: &ParamSchedule,
    cell: &SimConfig,
) -> Result<Vec<StepOutput>> {
    let s = &trace.samples;
    range
        .map(|k| {
            let prev = (k > 0).then(|| (s[k - 1].current, params.at(k - 1)));
            kf.advance(k == 0, prev, s[k].voltage, s[k].current, params.at(k), cell).map_err(|e| e.at_step(k))
        })
        .collect()
}

/// Steps every member over `range` of the trace. Members run independently
/// (in parallel when `parallel` is set); the probability update then runs
/// as a sequential reduction, so the result does not depend on scheduling.
pub fn run_interval(
    bank: &mut FilterBank,
    trace: &Trace,
    range: Range<usize>,
    params: &ParamSchedule,
    cell: &SimConfig,
    prob_floor: f64,
    parallel: bool,
) -> Result<IntervalResult> {
    if bank.is_empty() || range.is_empty() || range.end > trace.len() {
        return Err(Error::InvalidInput(format!(
            "interval {:?} over a trace of {} samples with {} filters",
            range,
            trace.len(),
            bank.len()
        )));
    }
    let outputs: Vec<Result<Vec<StepOutput>>> = if parallel && bank.len() > 1 {
        bank.filters.par_iter_mut().map(|kf| step_filter(kf, trace, range.clone(), params, cell)).collect()
    } else {
        bank.filters.iter_mut().map(|kf| step_filter(kf, trace, range.clone(), params, cell)).collect()
    };
    let outputs: Vec<Vec<StepOutput>> = outputs.into_iter().collect::<Result<_>>()?;

    let mut probs = uniform(bank.len());
    let mut history = Vec::with_capacity(range.len());
    let mut resets = 0;
    for (i, k) in range.clone().enumerate() {
        let y = trace.samples[k].voltage;
        let lls = outputs
            .iter()
            .map(|o| log_likelihood(y, o[i].predicted_voltage, o[i].innovation_variance))
            .collect::<Result<Vec<f64>>>()
            .map_err(|e| e.at_step(k))?;
        let upd = update_probabilities_log(&probs, &lls, prob_floor)?;
        resets += upd.reset as usize;
        probs = upd.probs;
        history.push(probs.clone());
    }
    for (inn, o) in bank.innovations.iter_mut().zip(&outputs) {
        *inn = o.iter().map(|s| s.innovation).collect();
    }
    bank.probabilities = probs.clone();

    let op = argmax_lowest(&probs);
    let best = &bank.filters[op];
    let out = outputs.into_iter().nth(op).expect("optimal index in range");
    let corrected = out
        .iter()
        .map(|s| {
            let soc = s.posterior.0.soc;
            Ok((soc, model_ocv(best, soc)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(IntervalResult {
        optimal_index: op,
        soc_trace: out.iter().map(|s| s.posterior.0.soc).collect(),
        corrected_osc_points: corrected,
        final_state: (best.x, best.p),
        outputs: out,
        probabilities: probs,
        probability_history: history,
        underflow_resets: resets,
    })
}

/// OCV the filter's measurement model assigns to `soc`.
fn model_ocv(kf: &KfState, soc: f64) -> Result<f64> {
    match (kf.slope_override, kf.anchor) {
        (Some(s), Some(a)) => Ok(a.ocv + s * (soc - a.state.soc)),
        _ => kf.curve.ocv(soc),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Single EKF on the original curve.
    Warmup,
    Adaptive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalDiagnostics {
    pub m: usize,
    pub start: usize,
    pub end: usize,
    pub phase: Phase,
    /// Verdict from the two preceding intervals, adaptive phase only.
    pub verdict: Option<ErrorSignVerdict>,
    pub mode: Option<Mode>,
    pub slopes: Vec<f64>,
    pub optimal_index: usize,
    pub prob_max: f64,
    /// The bank failed numerically and a plain EKF covered the interval.
    pub degenerate: bool,
    pub underflow_resets: usize,
}

#[derive(Debug, Clone)]
pub struct AmmkfOutput {
    /// Output of the filter that was optimal at each step's interval.
    pub steps: Vec<StepOutput>,
    /// `(soc, ocv, interval)` from the optimal affine models; may be multivalued.
    pub corrected_osc: Vec<(f64, f64, usize)>,
    pub intervals: Vec<IntervalDiagnostics>,
    /// Innovations of the optimal filter per interval.
    pub innovation_history: Vec<IntervalInnovations>,
    /// Probability vector after every adaptive-phase step, with its interval.
    pub probability_history: Vec<(usize, Vec<f64>)>,
    /// First adaptive interval, if convergence was reached.
    pub adaptive_from: Option<usize>,
}

impl AmmkfOutput {
    pub fn soc(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.posterior.0.soc).collect()
    }
}

fn interval_record(m: usize, outs: &[StepOutput], r: f64) -> IntervalInnovations {
    let last = outs.last().expect("non-empty interval");
    IntervalInnovations {
        m,
        values: outs.iter().map(|s| s.innovation).collect(),
        h_used: last.h,
        p_minus_last: last.prior.1,
        r,
    }
}

/// Runs the full two-phase estimator. `initial` carries the original curve,
/// the noise model and the initial estimate for sample 0.
pub fn run_ammkf(
    initial: KfState,
    params: &ParamSchedule,
    trace: &Trace,
    cell: &SimConfig,
    cfg: &BankConfig,
) -> Result<AmmkfOutput> {
    cfg.validate()?;
    initial.noise.validate()?;
    params.check_len(trace.len())?;
    check_dt(trace, cell)?;
    let l = cfg.interval_len;
    if trace.len() < 2 * l {
        return Err(Error::InvalidInput(format!(
            "trace of {} samples is shorter than two intervals of {l}",
            trace.len()
        )));
    }
    let original: Arc<OscCurve> = initial.curve.clone();
    let base = KfState { slope_override: None, anchor: None, ..initial };
    let mut conv = cfg.convergence;
    if conv.abs_floor.is_none() && cfg.convergence_floor_sigmas > 0.0 {
        conv.abs_floor = Some(cfg.convergence_floor_sigmas * base.noise.r.sqrt());
    }

    let mut x = base.x;
    let mut p = base.p;
    let mut anchor_ocv: Option<f64> = None;
    let mut adaptive_from = None;
    let mut out = AmmkfOutput {
        steps: Vec::with_capacity(trace.len()),
        corrected_osc: Vec::new(),
        intervals: Vec::new(),
        innovation_history: Vec::new(),
        probability_history: Vec::new(),
        adaptive_from: None,
    };

    let mut start = 0;
    let mut m = 0;
    while start < trace.len() {
        let end = (start + l).min(trace.len());
        let handoff = KfState { x, p, ..base.clone() };
        let adaptive = adaptive_from.is_some() && out.innovation_history.len() >= 2;

        let mut diag = IntervalDiagnostics {
            m,
            start,
            end,
            phase: if adaptive { Phase::Adaptive } else { Phase::Warmup },
            verdict: None,
            mode: None,
            slopes: Vec::new(),
            optimal_index: 0,
            prob_max: 1.0,
            degenerate: false,
            underflow_resets: 0,
        };

        let result = if adaptive {
            let h = &out.innovation_history;
            let verdict = analyze_pair(&h[h.len() - 2], &h[h.len() - 1], &cfg.ccm)?;
            let prev = out.intervals.last().expect("previous interval");
            let mean_i: f64 = trace.samples[prev.start..prev.end].iter().map(|s| s.current).sum::<f64>()
                / (prev.end - prev.start) as f64;
            let mode = if mean_i >= 0.0 { Mode::Discharge } else { Mode::Charge };
            let ocv0 = match (cfg.anchor, anchor_ocv) {
                (AnchorMode::Chained, Some(v)) => v,
                _ => original.ocv(x.soc).map_err(|e| e.at_step(start))?,
            };
            let mut bank = if cfg.n == 1 {
                FilterBank::from_filters(vec![handoff.clone()], m)
            } else {
                let base_slope = original.slope(x.soc).map_err(|e| e.at_step(start))?;
                let slopes = build_slope_set(base_slope, verdict.sign, mode, cfg);
                FilterBank::new(&handoff, &slopes, Anchor { state: x, ocv: ocv0 }, m)
            };
            diag.verdict = Some(verdict);
            diag.mode = Some(mode);
            diag.slopes = bank.filters.iter().filter_map(|f| f.slope_override).collect();
            match run_interval(&mut bank, trace, start..end, params, cell, cfg.prob_floor, cfg.parallel) {
                Ok(r) => Ok(r),
                Err(e @ (Error::AtStep { .. } | Error::Degenerate(_))) => {
                    log::warn!("interval {m}: bank failed ({e}); falling back to the original curve");
                    diag.degenerate = true;
                    let mut single = FilterBank::from_filters(vec![handoff.clone()], m);
                    run_interval(&mut single, trace, start..end, params, cell, cfg.prob_floor, false)
                }
                Err(e) => Err(e),
            }?
        } else {
            let mut single = FilterBank::from_filters(vec![handoff], m);
            run_interval(&mut single, trace, start..end, params, cell, cfg.prob_floor, false)?
        };

        diag.optimal_index = result.optimal_index;
        diag.prob_max = result.probabilities[result.optimal_index];
        diag.underflow_resets = result.underflow_resets;
        if adaptive {
            out.corrected_osc.extend(result.corrected_osc_points.iter().map(|&(s, v)| (s, v, m)));
            out.probability_history.extend(result.probability_history.iter().map(|p| (m, p.clone())));
            anchor_ocv = if diag.degenerate { None } else { result.corrected_osc_points.last().map(|p| p.1) };
        }
        out.innovation_history.push(interval_record(m, &result.outputs, base.noise.r));
        x = result.final_state.0;
        p = result.final_state.1;
        out.steps.extend(result.outputs);
        out.intervals.push(diag);

        if adaptive_from.is_none() && end - start == l && detect_convergence(&out.innovation_history, &conv) {
            adaptive_from = Some(m + 1);
            log::debug!("innovations converged after interval {m}");
        }
        start = end;
        m += 1;
    }
    out.adaptive_from = adaptive_from;
    Ok(out)
}
