//! First-order Thevenin cell model and the ground-truth simulator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure_finite, Error, Result};
use crate::osc::OscCurve;

pub const DISCHARGE_CUTOFF_V: f64 = 2.0;
pub const CHARGE_CUTOFF_V: f64 = 3.6;
/// Actual capacity of the reference LFP cell.
pub const REFERENCE_CAPACITY_AH: f64 = 1.063;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EcmParams {
    pub r0: f64,
    pub rp: f64,
    pub cp: f64,
}

impl EcmParams {
    pub fn new(r0: f64, rp: f64, cp: f64) -> Result<Self> {
        let p = EcmParams { r0, rp, cp };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("r0", self.r0), ("rp", self.rp), ("cp", self.cp)] {
            ensure_finite(name, v)?;
            if v <= 0.0 {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn tau(&self) -> f64 {
        self.rp * self.cp
    }

    /// Per-step polarization decay `exp(-dt / tau)`.
    pub fn decay(&self, dt: f64) -> f64 {
        (-dt / self.tau()).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatteryState {
    pub soc: f64,
    pub up: f64,
}

impl BatteryState {
    pub fn new(soc: f64, up: f64) -> Self {
        BatteryState { soc, up }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub capacity_ah: f64,
    pub coulombic_efficiency: f64,
    pub dt: f64,
    pub voltage_noise_sigma: f64,
    pub current_noise_sigma: f64,
    pub rng_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            capacity_ah: REFERENCE_CAPACITY_AH,
            coulombic_efficiency: 1.0,
            dt: 1.0,
            voltage_noise_sigma: 0.0,
            current_noise_sigma: 0.0,
            rng_seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if !(self.capacity_ah > 0.0) || !self.capacity_ah.is_finite() {
            return bad(format!("capacity_ah must be positive, got {}", self.capacity_ah));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.coulombic_efficiency > 0.0 && self.coulombic_efficiency <= 1.0) {
            return bad(format!("coulombic_efficiency must lie in (0, 1], got {}", self.coulombic_efficiency));
        }
        for (name, v) in
            [("voltage_noise_sigma", self.voltage_noise_sigma), ("current_noise_sigma", self.current_noise_sigma)]
        {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }

    /// SOC drop per ampere over one step.
    pub fn soc_per_amp_step(&self) -> f64 {
        self.coulombic_efficiency * self.dt / (3600.0 * self.capacity_ah)
    }
}

/// Which SOC bound was hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SocClamp {
    Empty,
    Full,
}

pub(crate) fn clamp_soc(soc: f64) -> (f64, Option<SocClamp>) {
    if soc < 0.0 {
        (0.0, Some(SocClamp::Empty))
    } else if soc > 1.0 {
        (1.0, Some(SocClamp::Full))
    } else {
        (soc, None)
    }
}

/// Unclamped exact discretization shared by the simulator and the filter prediction.
pub(crate) fn propagate(state: BatteryState, params: &EcmParams, current: f64, cfg: &SimConfig) -> BatteryState {
    let decay = params.decay(cfg.dt);
    BatteryState {
        soc: state.soc - cfg.soc_per_amp_step() * current,
        up: decay * state.up + (1.0 - decay) * params.rp * current,
    }
}

/// Advances the true state by one step under `current` (discharge positive).
/// Returns the new state and the bound it was clamped to, if any.
pub fn step_state(
    state: BatteryState,
    params: &EcmParams,
    current: f64,
    cfg: &SimConfig,
) -> Result<(BatteryState, Option<SocClamp>)> {
    ensure_finite("soc", state.soc)?;
    ensure_finite("up", state.up)?;
    ensure_finite("current", current)?;
    params.validate()?;
    cfg.validate()?;
    let next = propagate(state, params, current, cfg);
    let (soc, clamp) = clamp_soc(next.soc);
    Ok((BatteryState { soc, up: next.up }, clamp))
}

pub fn terminal_voltage(state: BatteryState, params: &EcmParams, current: f64, curve: &OscCurve) -> Result<f64> {
    Ok(curve.ocv(state.soc)? - state.up - params.r0 * current)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cutoff {
    Discharge,
    Charge,
}

pub fn cutoff(voltage: f64) -> Option<Cutoff> {
    if voltage < DISCHARGE_CUTOFF_V {
        Some(Cutoff::Discharge)
    } else if voltage > CHARGE_CUTOFF_V {
        Some(Cutoff::Charge)
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceSample {
    pub t: f64,
    pub current: f64,
    pub voltage: f64,
    pub true_soc: Option<f64>,
    pub true_up: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TraceEvent {
    /// The state after `step` was clamped.
    SocClamped { step: usize, bound: SocClamp },
    /// The true terminal voltage at `step` crossed a cutoff; the trace ends there.
    Cutoff { step: usize, kind: Cutoff, voltage: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub dt: f64,
    pub samples: Vec<TraceSample>,
    pub events: Vec<TraceEvent>,
}

impl Trace {
    /// Builds a trace from samples, checking finiteness and uniform spacing.
    pub fn new(dt: f64, samples: Vec<TraceSample>) -> Result<Self> {
        let trace = Trace { dt, samples, events: Vec::new() };
        trace.validate()?;
        Ok(trace)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidInput(format!("trace dt must be positive, got {}", self.dt)));
        }
        for (k, s) in self.samples.iter().enumerate() {
            for (name, v) in [("t", s.t), ("current", s.current), ("voltage", s.voltage)] {
                ensure_finite(name, v).map_err(|e| e.at_step(k))?;
            }
            if k > 0 {
                let gap = s.t - self.samples[k - 1].t;
                if (gap - self.dt).abs() > 1e-6 * self.dt.max(1.0) {
                    return Err(Error::InvalidInput(format!("sample {k}: spacing {gap} differs from dt {}", self.dt)));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn currents(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.current).collect()
    }

    pub fn voltages(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.voltage).collect()
    }

    /// True SOC column, if every sample carries one.
    pub fn true_soc(&self) -> Option<Vec<f64>> {
        self.samples.iter().map(|s| s.true_soc).collect()
    }

    pub fn cutoff_event(&self) -> Option<TraceEvent> {
        self.events.iter().copied().find(|e| matches!(e, TraceEvent::Cutoff { .. }))
    }
}

/// Runs the cell through `profile` from `initial`. Sample `k` holds the
/// terminal voltage of state `k` under current `k`; state `k + 1` follows
/// from that current. Measurement noise is drawn voltage first, then current.
pub fn simulate_profile(
    initial: BatteryState,
    params: &EcmParams,
    curve: &OscCurve,
    profile: &[f64],
    cfg: &SimConfig,
) -> Result<Trace> {
    if profile.is_empty() {
        return Err(Error::InvalidInput("profile is empty".into()));
    }
    params.validate()?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut noise = |sigma: f64| -> f64 {
        let z: f64 = StandardNormal.sample(&mut rng);
        sigma * z
    };

    let mut state = initial;
    let mut samples = Vec::with_capacity(profile.len());
    let mut events = Vec::new();
    for (k, &current) in profile.iter().enumerate() {
        let ut = terminal_voltage(state, params, current, curve).map_err(|e| e.at_step(k))?;
        let dv = noise(cfg.voltage_noise_sigma);
        let di = noise(cfg.current_noise_sigma);
        samples.push(TraceSample {
            t: k as f64 * cfg.dt,
            current: current + di,
            voltage: ut + dv,
            true_soc: Some(state.soc),
            true_up: Some(state.up),
        });
        if let Some(kind) = cutoff(ut) {
            events.push(TraceEvent::Cutoff { step: k, kind, voltage: ut });
            log::info!("simulation stopped at step {k}: {kind:?} cutoff ({ut:.4} V)");
            break;
        }
        let (next, clamp) = step_state(state, params, current, cfg).map_err(|e| e.at_step(k))?;
        if let Some(bound) = clamp {
            events.push(TraceEvent::SocClamped { step: k, bound });
        }
        state = next;
    }
    Ok(Trace { dt: cfg.dt, samples, events })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params() -> EcmParams {
        EcmParams::new(0.06, 0.025, 1200.0).unwrap()
    }

    #[test]
    fn equilibrium_and_decay() {
        let cfg = SimConfig::default();
        let p = params();
        let (s, c) = step_state(BatteryState::new(0.5, 0.0), &p, 0.0, &cfg).unwrap();
        assert_eq!(s, BatteryState::new(0.5, 0.0));
        assert!(c.is_none());

        let p = EcmParams::new(0.1, 0.5, 2.0).unwrap(); // tau = dt = 1 s
        let (s, _) = step_state(BatteryState::new(0.3, 0.1), &p, 0.0, &cfg).unwrap();
        assert!((s.up - 0.1 * (-1.0f64).exp()).abs() < 1e-15);
        assert!((s.up - 0.0367879).abs() < 1e-7);
        assert_eq!(s.soc, 0.3);
    }

    #[test]
    fn one_amp_hour() {
        let cfg = SimConfig::default();
        let p = params();
        let mut s = BatteryState::new(1.0, 0.0);
        for _ in 0..3600 {
            s = step_state(s, &p, 1.0, &cfg).unwrap().0;
        }
        let expected = -1.0 / 1.063;
        assert!(((s.soc - 1.0) - expected).abs() < 1e-12);
        assert!((expected + 0.94073).abs() < 1e-5);
    }

    #[test]
    fn clamps_are_reported() {
        let cfg = SimConfig::default();
        let p = params();
        let (s, c) = step_state(BatteryState::new(1e-5, 0.0), &p, 10.0, &cfg).unwrap();
        assert_eq!(s.soc, 0.0);
        assert_eq!(c, Some(SocClamp::Empty));
        let (s, c) = step_state(BatteryState::new(1.0, 0.0), &p, -1.0, &cfg).unwrap();
        assert_eq!(s.soc, 1.0);
        assert_eq!(c, Some(SocClamp::Full));
        assert!(step_state(BatteryState::new(f64::NAN, 0.0), &p, 0.0, &cfg).is_err());
        assert!(step_state(BatteryState::new(0.5, 0.0), &p, f64::INFINITY, &cfg).is_err());
    }

    #[test]
    fn terminal_voltage_arithmetic() {
        let curve = OscCurve::new(&[(0.0, 3.30), (1.0, 3.30)]).unwrap();
        let p = EcmParams::new(0.1, 0.05, 100.0).unwrap();
        let ut = terminal_voltage(BatteryState::new(0.5, 0.05), &p, 1.0, &curve).unwrap();
        assert!((ut - 3.15).abs() < 1e-12);
        let rest = terminal_voltage(BatteryState::new(0.5, 0.0), &p, 0.0, &curve).unwrap();
        assert_eq!(rest, 3.30);
        let partial = OscCurve::new(&[(0.2, 3.2), (0.8, 3.3)]).unwrap();
        assert!(matches!(terminal_voltage(BatteryState::new(0.1, 0.0), &p, 0.0, &partial), Err(Error::Domain { .. })));
        assert_eq!(cutoff(1.99), Some(Cutoff::Discharge));
        assert_eq!(cutoff(3.61), Some(Cutoff::Charge));
        assert_eq!(cutoff(3.3), None);
    }

    #[test]
    fn rest_profile() {
        let curve = OscCurve::lifepo4_reference();
        let p = params();
        let cfg = SimConfig::default();
        let tr = simulate_profile(BatteryState::new(0.6, 0.02), &p, &curve, &vec![0.0; 600], &cfg).unwrap();
        let last = tr.samples.last().unwrap();
        assert_eq!(last.true_soc, Some(0.6));
        assert!(last.true_up.unwrap().abs() < 1e-9);
        assert!((last.voltage - curve.ocv(0.6).unwrap()).abs() < 1e-9);
        assert!(tr.events.is_empty());
    }

    #[test]
    fn deterministic_runs() {
        let curve = OscCurve::lifepo4_reference();
        let p = params();
        let profile: Vec<f64> = (0..500).map(|k| if k % 40 < 20 { 1.0 } else { -0.5 }).collect();
        let mut cfg = SimConfig::default();
        let a = simulate_profile(BatteryState::new(0.7, 0.0), &p, &curve, &profile, &cfg).unwrap();
        let b = simulate_profile(BatteryState::new(0.7, 0.0), &p, &curve, &profile, &cfg).unwrap();
        assert_eq!(a, b);
        cfg.voltage_noise_sigma = 0.002;
        cfg.current_noise_sigma = 0.01;
        cfg.rng_seed = 9;
        let c = simulate_profile(BatteryState::new(0.7, 0.0), &p, &curve, &profile, &cfg).unwrap();
        let d = simulate_profile(BatteryState::new(0.7, 0.0), &p, &curve, &profile, &cfg).unwrap();
        assert_eq!(c, d);
        cfg.rng_seed = 10;
        let e = simulate_profile(BatteryState::new(0.7, 0.0), &p, &curve, &profile, &cfg).unwrap();
        assert_ne!(c, e);
    }

    #[test]
    fn cutoff_ends_the_trace() {
        let curve = OscCurve::lifepo4_reference();
        let p = params();
        let cfg = SimConfig::default();
        let tr = simulate_profile(BatteryState::new(0.05, 0.0), &p, &curve, &vec![8.0; 2000], &cfg).unwrap();
        assert!(tr.len() < 2000);
        match tr.cutoff_event() {
            Some(TraceEvent::Cutoff { step, kind, voltage }) => {
                assert_eq!(step, tr.len() - 1);
                assert_eq!(kind, Cutoff::Discharge);
                assert!(voltage < DISCHARGE_CUTOFF_V);
            }
            other => panic!("expected cutoff, got {other:?}"),
        }
        assert!(empty_clamp_or_cutoff(&tr));
    }

    fn empty_clamp_or_cutoff(tr: &Trace) -> bool {
        tr.events.iter().any(|e| matches!(e, TraceEvent::Cutoff { .. } | TraceEvent::SocClamped { .. }))
    }

    #[test]
    fn clamp_at_empty_is_annotated() {
        // a flat curve never reaches the cutoff, so the SOC clamp fires instead
        let curve = OscCurve::new(&[(0.0, 3.2), (1.0, 3.3)]).unwrap();
        let p = params();
        let cfg = SimConfig::default();
        let tr = simulate_profile(BatteryState::new(0.01, 0.0), &p, &curve, &vec![1.0; 100], &cfg).unwrap();
        assert_eq!(tr.len(), 100);
        let first = tr
            .events
            .iter()
            .find_map(|e| match e {
                TraceEvent::SocClamped { step, bound } => Some((*step, *bound)),
                _ => None,
            })
            .unwrap();
        assert_eq!(first.1, SocClamp::Empty);
        assert!(tr.samples.iter().all(|s| s.true_soc.unwrap() >= 0.0));
    }

    proptest! {
        #[test]
        fn exponential_decay(up0 in -0.2f64..0.2, tau in 1.0f64..500.0, k in 1usize..400) {
            let cfg = SimConfig::default();
            let p = EcmParams::new(0.05, 0.02, tau / 0.02).unwrap();
            let mut s = BatteryState::new(0.5, up0);
            for _ in 0..k {
                s = step_state(s, &p, 0.0, &cfg).unwrap().0;
            }
            let exact = up0 * (-(k as f64) * cfg.dt / p.tau()).exp();
            prop_assert!((s.up - exact).abs() <= 1e-12 * exact.abs().max(1e-300) + 1e-18);
        }

        #[test]
        fn charge_conservation(currents in prop::collection::vec(-1.0f64..1.5, 1..300), eta in 0.9f64..=1.0) {
            let cfg = SimConfig { coulombic_efficiency: eta, ..SimConfig::default() };
            let p = EcmParams::new(0.05, 0.02, 1000.0).unwrap();
            let mut s = BatteryState::new(0.5, 0.0);
            for &i in &currents {
                let (n, c) = step_state(s, &p, i, &cfg).unwrap();
                prop_assert!(c.is_none());
                s = n;
            }
            let expected = -eta * currents.iter().sum::<f64>() * cfg.dt / (3600.0 * cfg.capacity_ah);
            let got = s.soc - 0.5;
            // relative to the gross charge moved, so near-zero net profiles stay meaningful
            let gross = eta * currents.iter().map(|i| i.abs()).sum::<f64>() * cfg.dt / (3600.0 * cfg.capacity_ah);
            prop_assert!((got - expected).abs() <= 1e-12 * gross.max(expected.abs()));
        }

        #[test]
        fn half_steps_compose(up0 in -0.2f64..0.2, i in -2.0f64..2.0, tau in 0.5f64..300.0) {
            let p = EcmParams::new(0.05, 0.03, tau / 0.03).unwrap();
            let full = SimConfig::default();
            let half = SimConfig { dt: 0.5, ..SimConfig::default() };
            let one = step_state(BatteryState::new(0.5, up0), &p, i, &full).unwrap().0;
            let a = step_state(BatteryState::new(0.5, up0), &p, i, &half).unwrap().0;
            let two = step_state(a, &p, i, &half).unwrap().0;
            prop_assert!((one.up - two.up).abs() <= 1e-12 * one.up.abs().max(1.0));
        }
    }
}
