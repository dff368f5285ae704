//! Energy detection with double thresholding.
//!
//! The noise floor is the iterated trimmed mean of per-bin power: bins above
//! `lower_factor` times the current estimate are dropped and the mean is
//! recomputed until it stops changing. For exponentially distributed noise
//! power that fixed point sits at a known fraction of the true mean, which is
//! divided out so the factors act on the noise mean itself. Candidate clusters
//! are maximal runs above the lower threshold; a cluster is kept when it holds
//! a bin above the upper threshold and is at least `min_run` bins long.

use serde::{Deserialize, Serialize};

use crate::ctensor::{Real, SpectrumFrame};
use crate::error::{Error, Result};
use crate::objectives::{extract_segments, Segment};

pub const MAX_FLOOR_ITERATIONS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LadConfig {
    pub lower_factor: f64,
    pub upper_factor: f64,
    pub min_run: usize,
}

impl Default for LadConfig {
    fn default() -> Self {
        Self { lower_factor: 2.66, upper_factor: 13.06, min_run: 2 }
    }
}

impl LadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lower_factor > 0.0 && self.upper_factor >= self.lower_factor && self.upper_factor.is_finite()) {
            return Err(Error::ConfigInvalid(format!(
                "need upper_factor >= lower_factor > 0, got {} and {}",
                self.upper_factor, self.lower_factor
            )));
        }
        if self.min_run == 0 {
            return Err(Error::ConfigInvalid("min_run must be at least 1".into()));
        }
        Ok(())
    }
}

/// Ratio of the trimmed-mean fixed point to the true mean for exponential
/// samples trimmed at `k` times the estimate: the `r` solving
/// `r = E[X | X <= k r]` with `X ~ Exp(1)`.
pub fn trimmed_mean_ratio(k: f64) -> f64 {
    let g = |c: f64| if c < 1e-6 { c / 2.0 } else { 1.0 - c * (-c).exp() / -(-c).exp_m1() };
    let mut r = 1.0;
    for _ in 0..200 {
        let next = g(k * r);
        if (next - r).abs() < 1e-15 {
            return next;
        }
        r = next;
    }
    r
}

/// Raw iterated trimmed mean (no bias correction).
pub fn trimmed_floor(power: &[f64], lower_factor: f64) -> f64 {
    if power.is_empty() {
        return 0.0;
    }
    let mut floor = power.iter().sum::<f64>() / power.len() as f64;
    for _ in 0..MAX_FLOOR_ITERATIONS {
        let limit = lower_factor * floor;
        let (sum, n) = power.iter().filter(|&&p| p <= limit).fold((0.0, 0usize), |(s, n), &p| (s + p, n + 1));
        if n == 0 {
            break;
        }
        let next = sum / n as f64;
        if next == floor {
            break;
        }
        floor = next;
    }
    floor
}

/// Estimated mean noise power per bin.
pub fn noise_floor(power: &[f64], lower_factor: f64) -> f64 {
    trimmed_floor(power, lower_factor) / trimmed_mean_ratio(lower_factor)
}

/// Double-threshold detection on per-bin power (any bin order).
pub fn lad_detect_power(power: &[f64], cfg: &LadConfig) -> Vec<Segment> {
    let floor = noise_floor(power, cfg.lower_factor);
    let lower = cfg.lower_factor * floor;
    let upper = cfg.upper_factor * floor;
    let above: Vec<bool> = power.iter().map(|&p| p > lower).collect();
    extract_segments(&above)
        .into_iter()
        .filter(|s| s.width() >= cfg.min_run && power[s.begin..=s.end].iter().any(|&p| p > upper))
        .collect()
}

/// Occupied segments of `spectrum` in centered bin order. Frames shorter than
/// 16 bins yield nothing.
pub fn lad_detect<T: Real>(spectrum: &SpectrumFrame<T>, cfg: &LadConfig) -> Vec<Segment> {
    if spectrum.len() < 16 {
        return Vec::new();
    }
    let power: Vec<f64> = spectrum.centered_power().iter().map(|p| p.to_f64().unwrap()).collect();
    lad_detect_power(&power, cfg)
}
