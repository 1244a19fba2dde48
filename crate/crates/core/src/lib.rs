//! State-of-charge estimation for LiFePO₄ cells whose OCV-SOC curve is not
//! known exactly.
//!
//! The crate bundles a first-order Thevenin simulator used as ground truth,
//! online circuit identification, a single EKF baseline, innovation
//! diagnostics and the adaptive multi-model Kalman filter that corrects the
//! curve while it estimates.
//!
//! Current is positive on discharge throughout.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ammkf;
pub mod arls;
pub mod config;
pub mod ecm;
pub mod ekf;
pub mod error;
pub mod innovation;
pub mod io;
pub mod metrics;
pub mod osc;
pub mod profile;
pub mod scenario;

pub use ammkf::{run_ammkf, AmmkfOutput, BankConfig, FilterBank, IntervalResult};
pub use arls::{identify_stream, ArlsConfig, RegressorSample, RegressorState};
pub use ecm::{simulate_profile, step_state, terminal_voltage, BatteryState, EcmParams, SimConfig, Trace};
pub use ekf::{run_ekf, KfState, NoiseConfig, ParamSchedule, StepOutput};
pub use error::{Error, Result};
pub use innovation::{ErrorSign, ErrorSignVerdict, IntervalInnovations};
pub use metrics::{compute_metrics, Metrics};
pub use osc::{curve_error, CurveTransform, OscCurve};
pub use profile::{generate_profile, DriveProfile, ProfileKind};
pub use scenario::{run_scenario, ScenarioConfig, ScenarioReport};
