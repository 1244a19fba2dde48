//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are rejected so a
//! typo cannot silently fall back to a default.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::Matrix2;

use crate::ammkf::{AnchorMode, BankConfig};
use crate::arls::ArlsConfig;
use crate::ecm::{EcmParams, SimConfig};
use crate::ekf::NoiseConfig;
use crate::error::{Error, Result};
use crate::innovation::{CcmThreshold, ConvergenceConfig};
use crate::osc::{CurveTransform, OscCurve};
use crate::profile::ProfileKind;

/// Every recognised key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "seed for measurement noise and profile jitter"),
    ("dt", "1", "sample period, s"),
    ("capacity_ah", "1.063", "cell capacity, Ah"),
    ("eta", "1", "coulombic efficiency"),
    ("voltage_noise", "0.002", "simulated voltage noise sigma, V"),
    ("current_noise", "0", "simulated current noise sigma, A"),
    ("r0", "0.06", "ohmic resistance, ohm"),
    ("rp", "0.025", "polarization resistance, ohm"),
    ("cp", "1200", "polarization capacitance, F"),
    ("identify_online", "false", "feed the filters with ARLS estimates instead of r0/rp/cp"),
    ("q00", "1e-10", "process noise on SOC per step"),
    ("q11", "1e-9", "process noise on Up per step, V^2"),
    ("r", "4e-6", "measurement noise variance, V^2"),
    ("p0_soc", "0.01", "initial SOC variance"),
    ("p0_up", "1e-4", "initial Up variance, V^2"),
    ("n", "7", "filters in the bank (odd)"),
    ("interval_len", "50", "samples per interval"),
    ("spread", "2", "largest slope ratio within a bank"),
    ("slope_floor", "1e-4", "smallest slope a filter may use, V per unit SOC"),
    ("prob_floor", "1e-6", "smallest model probability"),
    ("ccm_abs", "1e-8", "absolute CCM dead band, V^2"),
    ("ccm_rel", "0.05", "CCM dead band relative to the empirical ACM"),
    ("conv_window", "3", "intervals in the rolling innovation RMS"),
    ("conv_rho", "0.2", "required RMS drop relative to the first interval"),
    ("conv_rel_change", "0.1", "largest relative RMS change counted as settled"),
    ("conv_max_acm_ratio", "1.5", "largest empirical/theoretical ACM ratio counted as converged; none disables"),
    ("conv_floor_sigmas", "3", "RMS level, in sqrt(r), that counts as converged outright; 0 disables"),
    ("anchor", "chained", "chained | original"),
    ("parallel", "true", "step bank members in parallel"),
    ("a_ff", "0.1", "forgetting-factor gain"),
    ("lambda_min", "0.95", "lower bound of the forgetting factor"),
    ("lambda_const", "0.999", "forgetting factor without SOC feedback"),
    ("arls_p0", "1000", "initial RLS covariance scale"),
    ("warmup", "100", "samples before identified parameters are used"),
    ("plateau_only_identification", "false", "identify only while SOC is in [0.2, 0.8]"),
    ("true_curve", "builtin", "cell curve: builtin or a soc,ocv_v CSV path"),
    (
        "filter_curve",
        "same",
        "same | path | offset:V | soc_shift:X | slope_scale:K | blend:PATH:W | region_offset:LO:HI:TAPER:V",
    ),
    ("profile", "dst-like", "dst-like | pulse | constant | random-walk"),
    ("profile_ah", "0.6", "dst-like net discharge, Ah"),
    ("profile_duration_s", "7200", "dst-like and pulse duration, s"),
    ("profile_jitter", "0.1", "dst-like relative pulse jitter"),
    ("profile_current", "0.5", "constant current, pulse high level and random-walk mean, A"),
    ("profile_low", "-0.2", "pulse low level, A"),
    ("profile_period_s", "60", "pulse period, s"),
    ("profile_duty", "0.5", "pulse duty cycle"),
    ("profile_samples", "7200", "constant and random-walk length"),
    ("profile_step_sigma", "0.05", "random-walk step sigma, A"),
    ("profile_max_dev", "1.5", "random-walk bound around the mean, A"),
    ("initial_soc_true", "0.8", "true SOC at t = 0"),
    ("initial_soc_error", "0", "estimate minus truth at t = 0"),
    ("initial_up", "0", "true polarization voltage at t = 0, V"),
    ("max_ammkf_rmse", "none", "fail the scenario above this AMMKF RMSE"),
    ("max_ekf_rmse", "none", "fail the scenario above this EKF RMSE"),
    ("require_ammkf_better", "false", "fail unless the AMMKF RMSE is below the EKF's"),
];

/// Parses `key = value` lines. Errors carry 1-based line numbers.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                context: "config".into(),
                line: i + 1,
                message: format!("expected key = value, got `{line}`"),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.iter().any(|(name, _, _)| *name == k) {
            return Err(Error::Parse { context: "config".into(), line: i + 1, message: format!("unknown key `{k}`") });
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Parse {
                context: "config".into(),
                line: i + 1,
                message: format!("duplicate key `{k}`"),
            });
        }
    }
    Ok(out)
}

/// Fully resolved settings: file values over defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
    /// Directory relative paths in the file are resolved against.
    base_dir: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl Config {
    pub fn from_str_in(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut c = Config { base_dir: base_dir.into(), ..Config::default() };
        c.values.extend(parse_kv(text)?);
        c.check()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        Config::from_str_in(&text, dir)
    }

    /// Sets one key, validating it like a file entry would be.
    pub fn set(&mut self, key: &str, value: impl ToString) -> Result<()> {
        if !KEYS.iter().any(|(k, _, _)| *k == key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        let mut next = self.clone();
        next.values.insert(key.to_string(), value.to_string());
        next.check()?;
        *self = next;
        Ok(())
    }

    pub fn get_str(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("all keys have defaults")
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get_str(key);
        v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
    }

    fn get_opt(&self, key: &str) -> Result<Option<f64>> {
        match self.get_str(key) {
            "none" | "" => Ok(None),
            _ => self.get(key).map(Some),
        }
    }

    fn check(&self) -> Result<()> {
        self.sim()?.validate()?;
        self.noise()?.validate()?;
        self.bank()?.validate()?;
        self.arls()?.validate()?;
        self.ecm()?;
        self.profile_kind()?;
        self.thresholds()?;
        let truth = self.initial_soc_true()?;
        if !(0.0..=1.0).contains(&truth) {
            return Err(Error::Config(format!("initial_soc_true must lie in [0, 1], got {truth}")));
        }
        let est = self.initial_soc_true()? + self.initial_soc_error()?;
        if !(0.0..=1.0).contains(&est) {
            return Err(Error::Config(format!("initial estimate {est} outside [0, 1]")));
        }
        self.get::<f64>("initial_up")?;
        Ok(())
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn sim(&self) -> Result<SimConfig> {
        Ok(SimConfig {
            capacity_ah: self.get("capacity_ah")?,
            coulombic_efficiency: self.get("eta")?,
            dt: self.get("dt")?,
            voltage_noise_sigma: self.get("voltage_noise")?,
            current_noise_sigma: self.get("current_noise")?,
            rng_seed: self.get("seed")?,
        })
    }

    pub fn ecm(&self) -> Result<EcmParams> {
        EcmParams::new(self.get("r0")?, self.get("rp")?, self.get("cp")?)
    }

    pub fn identify_online(&self) -> Result<bool> {
        self.get("identify_online")
    }

    pub fn noise(&self) -> Result<NoiseConfig> {
        NoiseConfig::diagonal(self.get("q00")?, self.get("q11")?, self.get("r")?)
    }

    pub fn p0(&self) -> Result<Matrix2<f64>> {
        let (a, b): (f64, f64) = (self.get("p0_soc")?, self.get("p0_up")?);
        if !(a >= 0.0 && b >= 0.0) {
            return Err(Error::Config("initial variances must be >= 0".into()));
        }
        Ok(Matrix2::new(a, 0.0, 0.0, b))
    }

    pub fn bank(&self) -> Result<BankConfig> {
        let anchor = match self.get_str("anchor") {
            "chained" => AnchorMode::Chained,
            "original" => AnchorMode::Original,
            other => return Err(Error::Config(format!("anchor: unknown mode `{other}`"))),
        };
        Ok(BankConfig {
            n: self.get("n")?,
            interval_len: self.get("interval_len")?,
            spread: self.get("spread")?,
            slope_floor: self.get("slope_floor")?,
            prob_floor: self.get("prob_floor")?,
            ccm: CcmThreshold { abs_floor: self.get("ccm_abs")?, rel_to_acm: self.get("ccm_rel")? },
            convergence: ConvergenceConfig {
                window: self.get("conv_window")?,
                rho: self.get("conv_rho")?,
                max_rel_change: self.get("conv_rel_change")?,
                abs_floor: None,
                max_acm_ratio: self.get_opt("conv_max_acm_ratio")?,
            },
            convergence_floor_sigmas: self.get("conv_floor_sigmas")?,
            anchor,
            parallel: self.get("parallel")?,
        })
    }

    pub fn arls(&self) -> Result<ArlsConfig> {
        Ok(ArlsConfig {
            a: self.get("a_ff")?,
            lambda_min: self.get("lambda_min")?,
            lambda_const: self.get("lambda_const")?,
            p0: self.get("arls_p0")?,
            warmup: self.get("warmup")?,
            plateau_only_identification: self.get("plateau_only_identification")?,
            dt: self.get("dt")?,
            ..ArlsConfig::default()
        })
    }

    fn resolve(&self, p: &str) -> PathBuf {
        let path = Path::new(p);
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn true_curve(&self) -> Result<OscCurve> {
        match self.get_str("true_curve") {
            "builtin" => Ok(OscCurve::lifepo4_reference()),
            p => OscCurve::load(self.resolve(p)),
        }
    }

    /// The curve handed to the filters, built from the true curve unless a file is named.
    pub fn filter_curve(&self, truth: &OscCurve) -> Result<OscCurve> {
        let spec = self.get_str("filter_curve");
        let parts: Vec<&str> = spec.split(':').collect();
        let num = |i: usize| -> Result<f64> {
            parts
                .get(i)
                .ok_or_else(|| Error::Config(format!("filter_curve `{spec}`: missing field {i}")))?
                .parse()
                .map_err(|_| Error::Config(format!("filter_curve `{spec}`: bad number in field {i}")))
        };
        match parts[0] {
            "same" => Ok(truth.clone()),
            "offset" => truth.apply_transform(&CurveTransform::VoltageOffset(num(1)?)),
            "soc_shift" => truth.apply_transform(&CurveTransform::SocShift(num(1)?)),
            "slope_scale" => truth.apply_transform(&CurveTransform::SlopeScale(num(1)?)),
            "blend" => {
                let other = OscCurve::load(self.resolve(parts.get(1).copied().unwrap_or("")))?;
                truth.apply_transform(&CurveTransform::BlendToward { other, weight: num(2)? })
            }
            "region_offset" => truth.with_region_offset(num(1)?, num(2)?, num(3)?, num(4)?),
            _ => OscCurve::load(self.resolve(spec)),
        }
    }

    pub fn profile_kind(&self) -> Result<ProfileKind> {
        Ok(match self.get_str("profile") {
            "dst-like" => ProfileKind::DstLike {
                target_ah: self.get("profile_ah")?,
                duration_s: self.get("profile_duration_s")?,
                jitter: self.get("profile_jitter")?,
            },
            "pulse" => ProfileKind::Pulse {
                high: self.get("profile_current")?,
                low: self.get("profile_low")?,
                period_s: self.get("profile_period_s")?,
                duty: self.get("profile_duty")?,
                duration_s: self.get("profile_duration_s")?,
            },
            "constant" => {
                ProfileKind::Constant { current: self.get("profile_current")?, samples: self.get("profile_samples")? }
            }
            "random-walk" => ProfileKind::RandomWalk {
                mean: self.get("profile_current")?,
                step_sigma: self.get("profile_step_sigma")?,
                max_dev: self.get("profile_max_dev")?,
                samples: self.get("profile_samples")?,
            },
            other => return Err(Error::Config(format!("profile: unknown kind `{other}`"))),
        })
    }

    pub fn initial_soc_true(&self) -> Result<f64> {
        self.get("initial_soc_true")
    }

    pub fn initial_soc_error(&self) -> Result<f64> {
        self.get("initial_soc_error")
    }

    pub fn initial_up(&self) -> Result<f64> {
        self.get("initial_up")
    }

    pub fn thresholds(&self) -> Result<Thresholds> {
        Ok(Thresholds {
            max_ammkf_rmse: self.get_opt("max_ammkf_rmse")?,
            max_ekf_rmse: self.get_opt("max_ekf_rmse")?,
            require_ammkf_better: self.get("require_ammkf_better")?,
        })
    }

    /// Resolved configuration as `key = value` lines, suitable for reloading.
    pub fn manifest(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Thresholds {
    pub max_ammkf_rmse: Option<f64>,
    pub max_ekf_rmse: Option<f64>,
    pub require_ammkf_better: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = Config::default();
        assert_eq!(
            c.bank().unwrap(),
            BankConfig { convergence: ConvergenceConfig::default(), ..BankConfig::default() }
        );
        assert_eq!(c.sim().unwrap().capacity_ah, 1.063);
        assert!(c.check().is_ok());
    }

    #[test]
    fn parse_and_override() {
        let c = Config::from_str_in("# comment\n n = 5 \n\ninterval_len=50 # trailing\n", ".").unwrap();
        assert_eq!(c.bank().unwrap().n, 5);
        assert_eq!(c.bank().unwrap().interval_len, 50);
    }

    #[test]
    fn errors_have_lines() {
        assert!(matches!(Config::from_str_in("n = 5\nbogus = 1\n", "."), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(Config::from_str_in("n 5\n", "."), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(Config::from_str_in("n = 5\nn = 7\n", "."), Err(Error::Parse { line: 2, .. })));
        assert!(Config::from_str_in("n = 4\n", ".").is_err());
        assert!(Config::from_str_in("r = -1\n", ".").is_err());
        assert!(Config::from_str_in("anchor = sideways\n", ".").is_err());
    }

    #[test]
    fn manifest_reloads() {
        let mut c = Config::default();
        c.set("spread", 3.0).unwrap();
        c.set("filter_curve", "offset:0.01").unwrap();
        let again = Config::from_str_in(&c.manifest(), ".").unwrap();
        assert_eq!(again, c);
        assert!(c.set("nope", 1).is_err());
    }

    #[test]
    fn filter_curve_specs() {
        let truth = OscCurve::lifepo4_reference();
        let mut c = Config::default();
        assert_eq!(c.filter_curve(&truth).unwrap(), truth);
        c.set("filter_curve", "offset:0.02").unwrap();
        let f = c.filter_curve(&truth).unwrap();
        assert!((f.ocv(0.5).unwrap() - truth.ocv(0.5).unwrap() - 0.02).abs() < 1e-12);
        c.set("filter_curve", "region_offset:0.2:0.6:0.05:-0.02").unwrap();
        let f = c.filter_curve(&truth).unwrap();
        assert!((f.ocv(0.4).unwrap() - truth.ocv(0.4).unwrap() + 0.02).abs() < 1e-12);
        c.set("filter_curve", "region_offset:0.2").unwrap();
        assert!(c.filter_curve(&truth).is_err());
    }
}
