//! Synthetic drive cycles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DriveProfile {
    pub name: String,
    pub dt: f64,
    pub samples: Vec<f64>,
}

impl DriveProfile {
    /// Net charge drawn, in ampere-hours.
    pub fn net_ah(&self) -> f64 {
        self.samples.iter().sum::<f64>() * self.dt / 3600.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProfileKind {
    /// Repeated blocks of mixed discharge and regenerative pulses, scaled so
    /// the net discharge over `duration_s` equals `target_ah`. `jitter` is
    /// the relative random perturbation of each pulse level.
    DstLike {
        target_ah: f64,
        duration_s: f64,
        jitter: f64,
    },
    /// Square wave between `high` and `low`.
    Pulse {
        high: f64,
        low: f64,
        period_s: f64,
        duty: f64,
        duration_s: f64,
    },
    Constant {
        current: f64,
        samples: usize,
    },
    /// Gaussian random walk around `mean`, bounded to `mean ± max_dev`.
    RandomWalk {
        mean: f64,
        step_sigma: f64,
        max_dev: f64,
        samples: usize,
    },
}

impl ProfileKind {
    pub fn name(&self) -> &'static str {
        match self {
            ProfileKind::DstLike { .. } => "dst-like",
            ProfileKind::Pulse { .. } => "pulse",
            ProfileKind::Constant { .. } => "constant",
            ProfileKind::RandomWalk { .. } => "random-walk",
        }
    }
}

/// One block: (relative current, seconds). Positive is discharge; the net
/// is a discharge so the block can be scaled to any target charge.
const DST_BLOCK: [(f64, f64); 20] = [
    (0.0, 16.0),
    (0.6, 28.0),
    (-0.3, 12.0),
    (0.6, 8.0),
    (0.0, 16.0),
    (1.2, 24.0),
    (-0.6, 12.0),
    (0.6, 8.0),
    (0.0, 16.0),
    (1.2, 24.0),
    (-0.6, 12.0),
    (1.8, 8.0),
    (2.4, 36.0),
    (-0.6, 8.0),
    (1.2, 24.0),
    (0.0, 8.0),
    (1.8, 8.0),
    (-1.2, 12.0),
    (0.6, 40.0),
    (1.0, 40.0),
];

fn samples_for(duration_s: f64, dt: f64) -> Result<usize> {
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(Error::Config(format!("duration must be positive, got {duration_s}")));
    }
    Ok((duration_s / dt).round().max(1.0) as usize)
}

pub fn generate_profile(kind: &ProfileKind, dt: f64, seed: u64) -> Result<DriveProfile> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = match *kind {
        ProfileKind::DstLike { target_ah, duration_s, jitter } => {
            if !(target_ah > 0.0) || !(0.0..1.0).contains(&jitter) {
                return Err(Error::Config(format!(
                    "dst-like needs target_ah > 0 and jitter in [0, 1), got {target_ah}, {jitter}"
                )));
            }
            let n = samples_for(duration_s, dt)?;
            let mut raw = Vec::with_capacity(n);
            'outer: loop {
                for &(level, secs) in &DST_BLOCK {
                    let level = level * (1.0 + jitter * rng.random_range(-1.0..=1.0));
                    let steps = (secs / dt).round().max(1.0) as usize;
                    for _ in 0..steps {
                        if raw.len() == n {
                            break 'outer;
                        }
                        raw.push(level);
                    }
                }
            }
            let net: f64 = raw.iter().sum::<f64>() * dt / 3600.0;
            if !(net > 0.0) {
                return Err(Error::Config(format!("duration {duration_s} s too short for a net discharge")));
            }
            let scale = target_ah / net;
            raw.into_iter().map(|v| v * scale).collect()
        }
        ProfileKind::Pulse { high, low, period_s, duty, duration_s } => {
            if !(period_s > 0.0) || !(0.0..=1.0).contains(&duty) || !high.is_finite() || !low.is_finite() {
                return Err(Error::Config("pulse needs period > 0, duty in [0, 1] and finite levels".into()));
            }
            let n = samples_for(duration_s, dt)?;
            (0..n)
                .map(|k| {
                    let phase = (k as f64 * dt) % period_s;
                    if phase < duty * period_s {
                        high
                    } else {
                        low
                    }
                })
                .collect()
        }
        ProfileKind::Constant { current, samples } => {
            if samples == 0 || !current.is_finite() {
                return Err(Error::Config("constant needs samples > 0 and a finite current".into()));
            }
            vec![current; samples]
        }
        ProfileKind::RandomWalk { mean, step_sigma, max_dev, samples } => {
            if samples == 0 || !(step_sigma >= 0.0) || !(max_dev >= 0.0) || !mean.is_finite() {
                return Err(Error::Config("random-walk needs samples > 0 and non-negative spreads".into()));
            }
            let normal = Normal::new(0.0, step_sigma).map_err(|e| Error::Config(e.to_string()))?;
            let mut dev = 0.0f64;
            (0..samples)
                .map(|_| {
                    dev = (dev + normal.sample(&mut rng)).clamp(-max_dev, max_dev);
                    mean + dev
                })
                .collect()
        }
    };
    Ok(DriveProfile { name: kind.name().to_string(), dt, samples })
}
