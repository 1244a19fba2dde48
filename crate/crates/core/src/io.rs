//! CSV formats for traces, estimates and diagnostics.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ammkf::{AmmkfOutput, IntervalDiagnostics};
use crate::arls::IdentifyStep;
use crate::ecm::{Trace, TraceSample};
use crate::ekf::StepOutput;
use crate::error::{Error, Result};
use crate::innovation::{acm_values, ccm_values, infer_error_sign, CcmThreshold, ErrorSignVerdict};
use crate::metrics::Metrics;

const TRACE_COLUMNS: [&str; 3] = ["t", "current_a", "voltage_v"];

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    t: f64,
    current_a: f64,
    voltage_v: f64,
    #[serde(default)]
    true_soc: Option<f64>,
    #[serde(default)]
    true_up_v: Option<f64>,
}

pub fn write_trace<W: Write>(trace: &Trace, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for s in &trace.samples {
        w.serialize(TraceRow {
            t: s.t,
            current_a: s.current,
            voltage_v: s.voltage,
            true_soc: s.true_soc,
            true_up_v: s.true_up,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_trace(trace: &Trace, path: impl AsRef<Path>) -> Result<()> {
    write_trace(trace, create(path.as_ref())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IngestOptions {
    /// Reject non-uniform timestamps instead of resampling them.
    pub strict: bool,
    /// Resample to this spacing by zero-order hold.
    pub resample_dt: Option<f64>,
}

/// Reads a trace CSV. Rows are numbered from 1 for the header line.
pub fn read_trace<R: Read>(reader: R, opts: &IngestOptions) -> Result<Trace> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    for col in TRACE_COLUMNS {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::Parse { context: "trace".into(), line: 1, message: format!("missing column `{col}`") });
        }
    }
    let mut samples: Vec<TraceSample> = Vec::new();
    for (i, rec) in rdr.deserialize::<TraceRow>().enumerate() {
        let line = i + 2;
        let r = rec.map_err(|e| Error::Parse { context: "trace".into(), line, message: e.to_string() })?;
        let finite = [r.t, r.current_a, r.voltage_v].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Parse { context: "trace".into(), line, message: "non-finite value".into() });
        }
        if let Some(prev) = samples.last() {
            if r.t <= prev.t {
                return Err(Error::Parse {
                    context: "trace".into(),
                    line,
                    message: format!("time {} not increasing (previous {})", r.t, prev.t),
                });
            }
        }
        samples.push(TraceSample {
            t: r.t,
            current: r.current_a,
            voltage: r.voltage_v,
            true_soc: r.true_soc,
            true_up: r.true_up_v,
        });
    }
    if samples.len() < 2 {
        return Err(Error::Parse {
            context: "trace".into(),
            line: samples.len() + 1,
            message: "need at least 2 samples".into(),
        });
    }
    let gaps: Vec<f64> = samples.windows(2).map(|w| w[1].t - w[0].t).collect();
    let dt0 = gaps[0];
    let uniform = gaps.iter().all(|g| (g - dt0).abs() <= 1e-6 * dt0.max(1.0));
    match (uniform, opts.resample_dt) {
        (true, None) => Trace::new(dt0, samples),
        (false, _) if opts.strict => Err(Error::InvalidInput("non-uniform timestamps (strict mode)".into())),
        (u, target) => {
            let dt = target.unwrap_or_else(|| median(&gaps));
            if !u {
                log::warn!("non-uniform timestamps; resampling to dt = {dt} s by zero-order hold");
            }
            Trace::new(dt, zoh_resample(&samples, &gaps, dt)?)
        }
    }
}

pub fn load_trace(path: impl AsRef<Path>, opts: &IngestOptions) -> Result<Trace> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_trace(f, opts)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("finite gaps"));
    s[s.len() / 2]
}

/// Holds each sample until the next one, covering `[t0, t_last + last gap)`.
fn zoh_resample(samples: &[TraceSample], gaps: &[f64], dt: f64) -> Result<Vec<TraceSample>> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidInput(format!("resample dt must be positive, got {dt}")));
    }
    let t0 = samples[0].t;
    let t_end = samples[samples.len() - 1].t + gaps[gaps.len() - 1];
    let n = ((t_end - t0) / dt - 1e-9).ceil() as usize;
    let mut out = Vec::with_capacity(n);
    let mut j = 0;
    for k in 0..n {
        let t = t0 + k as f64 * dt;
        while j + 1 < samples.len() && samples[j + 1].t <= t + 1e-9 * dt {
            j += 1;
        }
        out.push(TraceSample { t, ..samples[j] });
    }
    Ok(out)
}

fn create(path: &Path) -> Result<std::fs::File> {
    std::fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

#[derive(Debug, Serialize, Deserialize)]
struct EstimateRow {
    t: f64,
    soc_est: f64,
    up_est: f64,
    innovation_v: f64,
    p00: f64,
    p11: f64,
}

pub fn write_estimates<W: Write>(trace: &Trace, steps: &[StepOutput], writer: W) -> Result<()> {
    if trace.len() != steps.len() {
        return Err(Error::LengthMismatch { left: trace.len(), right: steps.len() });
    }
    let mut w = csv::Writer::from_writer(writer);
    for (s, o) in trace.samples.iter().zip(steps) {
        let (x, p) = o.posterior;
        w.serialize(EstimateRow {
            t: s.t,
            soc_est: x.soc,
            up_est: x.up,
            innovation_v: o.innovation,
            p00: p[(0, 0)],
            p11: p[(1, 1)],
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads back `(t, soc_est)` from an estimate CSV.
pub fn read_estimates<R: Read>(reader: R) -> Result<Vec<(f64, f64)>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize::<EstimateRow>()
        .enumerate()
        .map(|(i, r)| {
            r.map(|r| (r.t, r.soc_est)).map_err(|e| Error::Parse {
                context: "estimates".into(),
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct IdentifyRow {
    t: f64,
    r0_ohm: Option<f64>,
    rp_ohm: Option<f64>,
    cp_f: Option<f64>,
    lambda: f64,
}

pub fn write_identification<W: Write>(steps: &[IdentifyStep], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for s in steps {
        w.serialize(IdentifyRow {
            t: s.t,
            r0_ohm: s.params.map(|p| p.r0),
            rp_ohm: s.params.map(|p| p.rp),
            cp_f: s.params.map(|p| p.cp),
            lambda: s.lambda,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct CorrectedRow {
    soc: f64,
    ocv_v: f64,
    interval: usize,
}

pub fn write_corrected_osc<W: Write>(points: &[(f64, f64, usize)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for &(soc, ocv_v, interval) in points {
        w.serialize(CorrectedRow { soc, ocv_v, interval })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corrected_osc<R: Read>(reader: R) -> Result<Vec<(f64, f64, usize)>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize::<CorrectedRow>()
        .enumerate()
        .map(|(i, r)| {
            r.map(|r| (r.soc, r.ocv_v, r.interval)).map_err(|e| Error::Parse {
                context: "corrected osc".into(),
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct DiagnosticsRow {
    interval: usize,
    ccm: Option<f64>,
    verdict: String,
    optimal_index: usize,
    prob_max: f64,
}

pub fn write_diagnostics<W: Write>(intervals: &[IntervalDiagnostics], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for d in intervals {
        w.serialize(DiagnosticsRow {
            interval: d.m,
            ccm: d.verdict.map(|v| v.ccm_value),
            verdict: d.verdict.map_or("none", |v| v.sign.as_str()).to_string(),
            optimal_index: d.optimal_index,
            prob_max: d.prob_max,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct InnovationRow {
    interval: usize,
    step: usize,
    innovation_v: f64,
    #[serde(default)]
    s_v2: Option<f64>,
}

/// One row per step, tagged with the interval it belongs to.
pub fn write_innovation_log<W: Write>(out: &AmmkfOutput, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for d in &out.intervals {
        for k in d.start..d.end {
            let s = &out.steps[k];
            w.serialize(InnovationRow {
                interval: d.m,
                step: k,
                innovation_v: s.innovation,
                s_v2: Some(s.innovation_variance),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Innovations and, when logged, the innovation variance per interval.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoggedInterval {
    pub values: Vec<f64>,
    pub last_s: Option<f64>,
}

pub fn read_innovation_log<R: Read>(reader: R) -> Result<BTreeMap<usize, LoggedInterval>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    for col in ["interval", "step", "innovation_v"] {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::Parse {
                context: "innovation log".into(),
                line: 1,
                message: format!("missing column `{col}`"),
            });
        }
    }
    let mut out: BTreeMap<usize, LoggedInterval> = BTreeMap::new();
    for (i, rec) in rdr.deserialize::<InnovationRow>().enumerate() {
        let r =
            rec.map_err(|e| Error::Parse { context: "innovation log".into(), line: i + 2, message: e.to_string() })?;
        let e = out.entry(r.interval).or_default();
        e.values.push(r.innovation_v);
        if r.s_v2.is_some() {
            e.last_s = r.s_v2;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairAnalysis {
    pub m: usize,
    pub ccm: f64,
    pub acm_emp: f64,
    pub acm_theo: Option<f64>,
    pub verdict: ErrorSignVerdict,
}

/// CCM and ACM for each pair of adjacent, equally long intervals.
pub fn analyze_log(log: &BTreeMap<usize, LoggedInterval>, th: &CcmThreshold) -> Result<Vec<PairAnalysis>> {
    let items: Vec<(&usize, &LoggedInterval)> = log.iter().collect();
    let mut out = Vec::new();
    for w in items.windows(2) {
        let ((&m0, prev), (&m, curr)) = (w[0], w[1]);
        if m != m0 + 1 || prev.values.len() != curr.values.len() {
            continue;
        }
        let ccm = ccm_values(&prev.values, &curr.values)?;
        let acm_emp = acm_values(&curr.values);
        let ratio = curr.last_s.map_or(f64::NAN, |s| acm_emp / s);
        out.push(PairAnalysis {
            m,
            ccm,
            acm_emp,
            acm_theo: curr.last_s,
            verdict: infer_error_sign(ccm, ratio, th.tau(acm_emp)),
        });
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct AnalysisRow {
    m: usize,
    ccm: f64,
    acm_emp: f64,
    acm_theo: Option<f64>,
    verdict: &'static str,
}

pub fn write_analysis<W: Write>(rows: &[PairAnalysis], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(AnalysisRow {
            m: r.m,
            ccm: r.ccm,
            acm_emp: r.acm_emp,
            acm_theo: r.acm_theo,
            verdict: r.verdict.sign.as_str(),
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct MetricsRow<'a> {
    method: &'a str,
    rmse: f64,
    mae: f64,
    max_abs_error: f64,
    convergence_time_s: Option<f64>,
    final_quarter_rmse: f64,
}

pub fn write_metrics<W: Write>(rows: &[(&str, Metrics)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for (method, m) in rows {
        w.serialize(MetricsRow {
            method,
            rmse: m.rmse,
            mae: m.mae,
            max_abs_error: m.max_abs_error,
            convergence_time_s: m.convergence_time_s,
            final_quarter_rmse: m.final_quarter_rmse,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Opens `dir/name` for writing, creating `dir` first.
pub fn output_file(dir: &Path, name: &str) -> Result<std::fs::File> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    create(&dir.join(name))
}
