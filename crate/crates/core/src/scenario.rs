//! One-call experiments: simulate a cell on its true curve, then estimate
//! with the baseline EKF and the AMMKF on the filter curve.

use std::path::Path;
use std::sync::Arc;

use nalgebra::Matrix2;

use crate::ammkf::{run_ammkf, AmmkfOutput, BankConfig};
use crate::arls::{identify_stream, ArlsConfig};
use crate::config::{Config, Thresholds};
use crate::ecm::{simulate_profile, BatteryState, EcmParams, SimConfig, Trace};
use crate::ekf::{run_ekf, KfState, NoiseConfig, ParamSchedule, StepOutput};
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{compute_metrics, Metrics};
use crate::osc::OscCurve;
use crate::profile::{generate_profile, ProfileKind};

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub true_curve: OscCurve,
    pub filter_curve: OscCurve,
    pub profile: ProfileKind,
    pub initial_soc_true: f64,
    pub initial_soc_error: f64,
    pub initial_up: f64,
    pub ecm: EcmParams,
    pub identify_online: bool,
    pub sim: SimConfig,
    pub noise: NoiseConfig,
    pub p0: Matrix2<f64>,
    pub bank: BankConfig,
    pub arls: ArlsConfig,
    pub thresholds: Thresholds,
}

impl ScenarioConfig {
    pub fn from_config(c: &Config) -> Result<Self> {
        let true_curve = c.true_curve()?;
        let filter_curve = c.filter_curve(&true_curve)?;
        Ok(ScenarioConfig {
            true_curve,
            filter_curve,
            profile: c.profile_kind()?,
            initial_soc_true: c.initial_soc_true()?,
            initial_soc_error: c.initial_soc_error()?,
            initial_up: c.initial_up()?,
            ecm: c.ecm()?,
            identify_online: c.identify_online()?,
            sim: c.sim()?,
            noise: c.noise()?,
            p0: c.p0()?,
            bank: c.bank()?,
            arls: c.arls()?,
            thresholds: c.thresholds()?,
        })
    }

    pub fn initial_estimate(&self) -> BatteryState {
        BatteryState::new((self.initial_soc_true + self.initial_soc_error).clamp(0.0, 1.0), 0.0)
    }

    pub fn filter(&self) -> KfState {
        KfState::new(self.initial_estimate(), self.p0, self.noise.clone(), Arc::new(self.filter_curve.clone()))
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub trace: Trace,
    pub params: ParamSchedule,
    pub ekf_steps: Vec<StepOutput>,
    pub ammkf: AmmkfOutput,
    pub ekf_metrics: Metrics,
    pub ammkf_metrics: Metrics,
    /// Threshold checks from the configuration that failed.
    pub violations: Vec<String>,
}

/// Coulomb-counted SOC from the initial estimate; `[k]` is the value before sample `k`.
pub fn coulomb_feedback(cfg: &ScenarioConfig, trace: &Trace) -> Vec<f64> {
    let mut soc = cfg.initial_estimate().soc;
    let per_amp = cfg.sim.soc_per_amp_step();
    trace
        .samples
        .iter()
        .map(|s| {
            let now = soc;
            soc = (soc - per_amp * s.current).clamp(0.0, 1.0);
            now
        })
        .collect()
}

/// Circuit parameters for the filters: fixed, or identified on the
/// measurements with a Coulomb-counted SOC as forgetting-factor feedback.
pub fn filter_params(cfg: &ScenarioConfig, trace: &Trace) -> Result<ParamSchedule> {
    if !cfg.identify_online {
        return Ok(ParamSchedule::Constant(cfg.ecm));
    }
    let id = identify_stream(trace, Some(&coulomb_feedback(cfg, trace)), &cfg.arls)?;
    Ok(ParamSchedule::PerStep(id.steps.iter().map(|s| s.params.unwrap_or(cfg.ecm)).collect()))
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioReport> {
    let ctx = |stage: &str, e: Error| Error::InvalidInput(format!("scenario {stage}: {e}"));
    let profile = generate_profile(&cfg.profile, cfg.sim.dt, cfg.sim.rng_seed).map_err(|e| ctx("profile", e))?;
    let truth0 = BatteryState::new(cfg.initial_soc_true, cfg.initial_up);
    let trace = simulate_profile(truth0, &cfg.ecm, &cfg.true_curve, &profile.samples, &cfg.sim)
        .map_err(|e| ctx("simulation", e))?;
    let params = filter_params(cfg, &trace).map_err(|e| ctx("identification", e))?;
    let ekf_steps = run_ekf(cfg.filter(), &params, &trace, &cfg.sim).map_err(|e| ctx("ekf", e))?;
    let ammkf = run_ammkf(cfg.filter(), &params, &trace, &cfg.sim, &cfg.bank).map_err(|e| ctx("ammkf", e))?;

    let truth = trace.true_soc().ok_or_else(|| Error::InvalidInput("simulated trace lacks true SOC".into()))?;
    let socs = |steps: &[StepOutput]| steps.iter().map(|s| s.posterior.0.soc).collect::<Vec<_>>();
    let ekf_metrics = compute_metrics(&socs(&ekf_steps), &truth, trace.dt)?;
    let ammkf_metrics = compute_metrics(&socs(&ammkf.steps), &truth, trace.dt)?;

    let mut violations = Vec::new();
    let th = &cfg.thresholds;
    if let Some(max) = th.max_ammkf_rmse {
        if ammkf_metrics.rmse > max {
            violations.push(format!("ammkf rmse {:.4} exceeds {max}", ammkf_metrics.rmse));
        }
    }
    if let Some(max) = th.max_ekf_rmse {
        if ekf_metrics.rmse > max {
            violations.push(format!("ekf rmse {:.4} exceeds {max}", ekf_metrics.rmse));
        }
    }
    if th.require_ammkf_better && ammkf_metrics.rmse >= ekf_metrics.rmse {
        violations.push(format!("ammkf rmse {:.4} not below ekf rmse {:.4}", ammkf_metrics.rmse, ekf_metrics.rmse));
    }
    Ok(ScenarioReport { trace, params, ekf_steps, ammkf, ekf_metrics, ammkf_metrics, violations })
}

/// Writes every scenario CSV and the resolved configuration into `dir`.
pub fn write_artifacts(report: &ScenarioReport, dir: &Path, manifest: &str) -> Result<()> {
    io::write_trace(&report.trace, io::output_file(dir, "trace.csv")?)?;
    io::write_estimates(&report.trace, &report.ekf_steps, io::output_file(dir, "ekf.csv")?)?;
    io::write_estimates(&report.trace, &report.ammkf.steps, io::output_file(dir, "ammkf.csv")?)?;
    io::write_corrected_osc(&report.ammkf.corrected_osc, io::output_file(dir, "corrected_osc.csv")?)?;
    io::write_diagnostics(&report.ammkf.intervals, io::output_file(dir, "diagnostics.csv")?)?;
    io::write_innovation_log(&report.ammkf, io::output_file(dir, "innovations.csv")?)?;
    io::write_metrics(
        &[("ekf", report.ekf_metrics), ("ammkf", report.ammkf_metrics)],
        io::output_file(dir, "metrics.csv")?,
    )?;
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Mean absolute OCV error of the corrected points and of the original
/// curve, both against the true curve at the points' own SOC values.
pub fn osc_correction_mae(points: &[(f64, f64, usize)], truth: &OscCurve, original: &OscCurve) -> Result<(f64, f64)> {
    if points.is_empty() {
        return Err(Error::InvalidInput("no corrected points".into()));
    }
    let mut corrected = 0.0;
    let mut uncorrected = 0.0;
    for &(soc, ocv, _) in points {
        let t = truth.ocv(soc)?;
        corrected += (ocv - t).abs();
        uncorrected += (original.ocv(soc)? - t).abs();
    }
    let n = points.len() as f64;
    Ok((corrected / n, uncorrected / n))
}
