//! Bucket (energy reservoir) model with linear throughput degradation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::PriceSeries;
use crate::profile::{ControlProfile, ControlUnit};

/// Tolerance on the [0, 1] state-of-charge bounds before a step is flagged.
pub const SOC_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketState {
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BucketParams {
    /// Energy capacity per cell (Wh).
    pub e_wh: f64,
    pub n_cells: f64,
    /// Currency per Wh of lost capacity.
    pub lambda_degr_wh: f64,
    /// Wh lost per W of peak power.
    pub k_power: f64,
    /// Wh lost per Wh of throughput.
    pub k_throughput: f64,
}

impl Default for BucketParams {
    fn default() -> Self {
        Self {
            // 2.7 Ah at the 3.64 V average voltage used to convert the per-Ah cost
            e_wh: 2.7 * 3.64,
            n_cells: 750.0,
            lambda_degr_wh: 0.33,
            k_power: 2.15e-4,
            k_throughput: 1.25e-5,
        }
    }
}

impl BucketParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.e_wh > 0.0) {
            return Err(Error::Config("bucket e_wh must be positive".into()));
        }
        if !(self.n_cells >= 1.0) {
            return Err(Error::Config("bucket n_cells must be at least 1".into()));
        }
        if !(self.k_power >= 0.0 && self.k_throughput >= 0.0) {
            return Err(Error::Config("bucket degradation coefficients must be non-negative".into()));
        }
        Ok(())
    }
}

/// Result of one integration step; out-of-bounds states are reported, not clamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome<S> {
    pub state: S,
    /// Magnitude by which a bound was exceeded, if any.
    pub violation: Option<f64>,
}

pub fn soc_violation(z: f64) -> Option<f64> {
    if z < -SOC_TOLERANCE {
        Some(-z)
    } else if z > 1.0 + SOC_TOLERANCE {
        Some(z - 1.0)
    } else {
        None
    }
}

/// Advances the state of charge under constant power `power_w` for `dt_s` seconds.
pub fn bucket_step(
    s: BucketState,
    power_w: f64,
    dt_s: f64,
    p: &BucketParams,
) -> Result<StepOutcome<BucketState>> {
    if !(dt_s > 0.0) {
        return Err(Error::Config(format!("step {dt_s} s must be positive")));
    }
    let z = s.z + power_w * dt_s / (p.e_wh * 3600.0);
    Ok(StepOutcome {
        state: BucketState { z },
        violation: soc_violation(z),
    })
}

/// Lost energy capacity per cell (Wh): peak-power term plus throughput term.
pub fn bucket_lost_capacity(profile: &ControlProfile, p: &BucketParams) -> f64 {
    if profile.is_empty() {
        return 0.0;
    }
    p.k_power * profile.max_abs() + p.k_throughput * profile.abs_integral_h()
}

/// Cash flow (currency) of a power profile: selling on discharge, buying on charge.
pub fn bucket_revenue(profile: &ControlProfile, prices: &PriceSeries, p: &BucketParams) -> Result<f64> {
    if profile.unit != ControlUnit::Power {
        return Err(Error::Config("bucket revenue needs a power profile".into()));
    }
    check_span(profile, prices)?;
    Ok(p.n_cells * price_weighted_integral_wh(&profile.values, profile.interval_s, prices, 0.0)?
        * -1.0)
}

pub(crate) fn check_span(profile: &ControlProfile, prices: &PriceSeries) -> Result<()> {
    if (profile.horizon_s() - prices.horizon_s()).abs() > 1e-6 {
        return Err(Error::Range(format!(
            "profile spans {} s but prices span {} s",
            profile.horizon_s(),
            prices.horizon_s()
        )));
    }
    Ok(())
}

/// ∫ u(t)·λ(t) dt / 3600 for piecewise-constant `u`, splitting intervals at hour
/// boundaries of the price series. `offset_s` shifts the profile start into the series.
pub(crate) fn price_weighted_integral_wh(
    values: &[f64],
    interval_s: f64,
    prices: &PriceSeries,
    offset_s: f64,
) -> Result<f64> {
    let step = prices.step_s();
    let mut total = 0.0;
    for (k, v) in values.iter().enumerate() {
        let mut t = offset_s + k as f64 * interval_s;
        let end = t + interval_s;
        while t < end - 1e-9 {
            let hour_end = ((t / step).floor() + 1.0) * step;
            let seg_end = hour_end.min(end);
            total += v * prices.price_at(t)? * (seg_end - t);
            t = seg_end;
        }
    }
    Ok(total / 3600.0)
}
