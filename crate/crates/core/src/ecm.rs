//! First-order RC equivalent-circuit model and the empirical calendar/cycle
//! degradation law it is paired with.
//!
//! Currents are positive when charging, the same convention as the bucket model.
//! The terminal voltage is therefore `OCV(z) + R_p·I_r + R_s·I`: a charging current
//! raises the voltage above OCV and a discharging current lowers it.

use serde::{Deserialize, Serialize};

use crate::bucket::{soc_violation, StepOutcome};
use crate::error::{Error, Result};
use crate::table::MonotoneCubic;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcmState {
    pub z: f64,
    /// Current through the parallel resistor (A).
    pub i_r: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EcmParams {
    /// Charge capacity (Ah).
    pub e_ah: f64,
    pub r_s: f64,
    pub r_p: f64,
    pub c_p: f64,
    /// OCV (V) against state of charge, through the tabulated points.
    pub ocv: MonotoneCubic,
    pub v_min: f64,
    pub v_max: f64,
    pub n_cells: f64,
    /// Currency per Ah of lost capacity.
    pub lambda_degr_ah: f64,
    /// Ambient temperature used by the degradation law (K).
    pub temperature_k: f64,
}

impl EcmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.e_ah > 0.0) {
            return Err(Error::Config("ecm e_ah must be positive".into()));
        }
        if !(self.r_s > 0.0 && self.r_p > 0.0 && self.c_p > 0.0) {
            return Err(Error::Config("ecm r_s, r_p and c_p must be positive".into()));
        }
        if !self.ocv.table().is_strictly_increasing() {
            return Err(Error::Config("ecm OCV table must increase strictly with SoC".into()));
        }
        let (lo, hi) = self.ocv.domain();
        if lo < 0.0 || hi > 1.0 {
            return Err(Error::Config("ecm OCV table must lie within SoC [0, 1]".into()));
        }
        if !(self.v_min < self.v_max) {
            return Err(Error::Config("ecm v_min must be below v_max".into()));
        }
        if !(self.n_cells >= 1.0) {
            return Err(Error::Config("ecm n_cells must be at least 1".into()));
        }
        if !(self.temperature_k > 0.0) {
            return Err(Error::Config("ecm temperature must be positive".into()));
        }
        Ok(())
    }

    pub fn time_constant_s(&self) -> f64 {
        self.r_p * self.c_p
    }
}

/// Coefficients of the calendar factor
/// `α = (v_slope·V_mean + v_offset)·scale·exp(−activation_k / T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaCoeffs {
    pub v_slope: f64,
    pub v_offset: f64,
    pub scale: f64,
    pub activation_k: f64,
}

/// Coefficients of the cycle factor
/// `β = quad·(V_rms − v_ref)² + constant + dod·soc_dev`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaCoeffs {
    pub quad: f64,
    pub v_ref: f64,
    pub constant: f64,
    pub dod: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchmalstiegParams {
    pub alpha: AlphaCoeffs,
    pub beta: BetaCoeffs,
    /// Seconds per unit of the calendar-time axis the α coefficients were fitted on.
    pub time_unit_s: f64,
    pub scale_divisor: f64,
}

impl SchmalstiegParams {
    /// Capacity-fade coefficients for NMC 18650 cells (time axis in days, throughput in Ah).
    pub fn literature() -> Self {
        Self {
            alpha: AlphaCoeffs {
                v_slope: 7.543,
                v_offset: -23.75,
                scale: 1e6,
                activation_k: 6976.0,
            },
            beta: BetaCoeffs {
                quad: 7.348e-3,
                v_ref: 3.667,
                constant: 7.6e-4,
                dod: 4.081e-3,
            },
            time_unit_s: 86_400.0,
            scale_divisor: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_divisor > 0.0) {
            return Err(Error::Config("scale_divisor must be positive".into()));
        }
        if !(self.time_unit_s > 0.0) {
            return Err(Error::Config("time_unit_s must be positive".into()));
        }
        Ok(())
    }

    /// Calendar factor, floored at zero so low mean voltages cannot heal the cell.
    pub fn alpha(&self, v_mean: f64, temperature_k: f64) -> f64 {
        let a = &self.alpha;
        ((a.v_slope * v_mean + a.v_offset) * a.scale * (-a.activation_k / temperature_k).exp()).max(0.0)
    }

    pub fn beta(&self, v_rms: f64, soc_dev: f64) -> f64 {
        let b = &self.beta;
        (b.quad * (v_rms - b.v_ref).powi(2) + b.constant + b.dod * soc_dev).max(0.0)
    }
}

/// Statistics of a trajectory that drive the degradation law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileStats {
    pub v_mean: f64,
    pub v_rms: f64,
    pub soc_dev: f64,
    pub temperature_k: f64,
    /// Elapsed time (s).
    pub t_end_s: f64,
    /// ∫|I| dt (Ah).
    pub ah_throughput: f64,
}

/// Forward-Euler step of the SoC and RC-branch equations.
pub fn ecm_step(s: EcmState, current_a: f64, dt_s: f64, p: &EcmParams) -> Result<StepOutcome<EcmState>> {
    if !(dt_s > 0.0 && dt_s <= 5.0) {
        return Err(Error::Config(format!("ecm step {dt_s} s must lie in (0, 5]")));
    }
    Ok(ecm_step_unchecked(s, current_a, dt_s, p))
}

#[inline]
pub(crate) fn ecm_step_unchecked(s: EcmState, current_a: f64, dt_s: f64, p: &EcmParams) -> StepOutcome<EcmState> {
    let z = s.z + current_a * dt_s / (p.e_ah * 3600.0);
    let i_r = s.i_r + dt_s * (current_a - s.i_r) / p.time_constant_s();
    StepOutcome {
        state: EcmState { z, i_r },
        violation: soc_violation(z),
    }
}

/// Terminal voltage under charge-positive current.
#[inline]
pub fn ecm_voltage(s: &EcmState, current_a: f64, p: &EcmParams) -> f64 {
    p.ocv.eval(s.z) + p.r_p * s.i_r + p.r_s * current_a
}

/// Collects the degradation statistics of uniformly sampled trajectories, each
/// sample standing for one `dt_s` step.
pub fn profile_stats(
    soc: &[f64],
    voltage: &[f64],
    current: &[f64],
    dt_s: f64,
    temperature_k: f64,
    t_end_s: f64,
) -> Result<ProfileStats> {
    let n = soc.len();
    if n == 0 {
        return Err(Error::Domain("profile statistics need a non-empty trajectory".into()));
    }
    if voltage.len() != n || current.len() != n {
        return Err(Error::Domain("soc, voltage and current trajectories differ in length".into()));
    }
    if !(dt_s > 0.0) || t_end_s < 0.0 {
        return Err(Error::Domain("time step must be positive and t_end non-negative".into()));
    }
    let span = n as f64 * dt_s;
    let v_mean = voltage.iter().sum::<f64>() * dt_s / span;
    let v_rms = (voltage.iter().map(|v| v * v).sum::<f64>() * dt_s / span).sqrt();
    let z_mean = soc.iter().sum::<f64>() * dt_s / span;
    let soc_dev = 2.0 * soc.iter().map(|z| (z_mean - z).abs()).sum::<f64>() * dt_s / span;
    let ah_throughput = current.iter().map(|i| i.abs()).sum::<f64>() * dt_s / 3600.0;
    Ok(ProfileStats {
        v_mean,
        v_rms,
        soc_dev,
        temperature_k,
        t_end_s,
        ah_throughput,
    })
}

/// Capacity lost (Ah) according to the calendar + square-root-throughput law.
pub fn schmalstieg_lost_capacity(stats: &ProfileStats, p: &EcmParams, q: &SchmalstiegParams) -> Result<f64> {
    if stats.t_end_s < 0.0 || stats.ah_throughput < 0.0 {
        return Err(Error::Domain(format!(
            "t_end ({}) and throughput ({}) must be non-negative",
            stats.t_end_s, stats.ah_throughput
        )));
    }
    let d = q.scale_divisor;
    let alpha = q.alpha(stats.v_mean, stats.temperature_k);
    let beta = q.beta(stats.v_rms, stats.soc_dev);
    let t = stats.t_end_s / q.time_unit_s;
    Ok((alpha / d) * t.powf(0.75) * p.e_ah + (beta / d) * stats.ah_throughput.sqrt() * p.e_ah)
}

/// Additional capacity loss (Ah) for a window that starts at battery age `age_s`
/// with `prior_ah` of accumulated throughput, given the window's own statistics.
pub fn schmalstieg_increment(
    stats: &ProfileStats,
    age_s: f64,
    prior_ah: f64,
    p: &EcmParams,
    q: &SchmalstiegParams,
) -> Result<f64> {
    if age_s < 0.0 || prior_ah < 0.0 || stats.t_end_s < 0.0 || stats.ah_throughput < 0.0 {
        return Err(Error::Domain("ages and throughputs must be non-negative".into()));
    }
    let d = q.scale_divisor;
    let t0 = age_s / q.time_unit_s;
    let t1 = (age_s + stats.t_end_s) / q.time_unit_s;
    let cal = q.alpha(stats.v_mean, stats.temperature_k) * (t1.powf(0.75) - t0.powf(0.75));
    let cyc = q.beta(stats.v_rms, stats.soc_dev)
        * ((prior_ah + stats.ah_throughput).sqrt() - prior_ah.sqrt());
    Ok((cal + cyc) / d * p.e_ah)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::Table1d;
    use approx::assert_relative_eq;

    fn linear_params() -> EcmParams {
        EcmParams {
            e_ah: 2.7,
            r_s: 0.01,
            r_p: 0.02,
            c_p: 5000.0,
            ocv: MonotoneCubic::new(Table1d::new(vec![0.0, 1.0], vec![3.0, 4.2]).unwrap()),
            v_min: 2.7,
            v_max: 4.2,
            n_cells: 1.0,
            lambda_degr_ah: 1.2,
            temperature_k: 298.15,
        }
    }

    #[test]
    fn rest_is_a_fixed_point() {
        let p = linear_params();
        let s = EcmState { z: 0.4, i_r: 0.0 };
        let out = ecm_step(s, 0.0, 5.0, &p).unwrap();
        assert_eq!(out.state, s);
    }

    #[test]
    fn branch_current_fixed_point() {
        let p = linear_params();
        let mut s = EcmState { z: 0.2, i_r: 1.3 };
        for _ in 0..500 {
            s = ecm_step(s, 1.3, 5.0, &p).unwrap().state;
            assert_eq!(s.i_r, 1.3);
        }
    }

    #[test]
    fn rc_decay_within_euler_bound() {
        let p = linear_params();
        let tau = p.time_constant_s();
        let dt = 5.0;
        let steps = (tau / dt).round() as usize;
        let mut s = EcmState { z: 0.5, i_r: 1.0 };
        for _ in 0..steps {
            s = ecm_step(s, 0.0, dt, &p).unwrap().state;
        }
        let exact = (-1.0f64).exp();
        assert!((s.i_r - exact).abs() <= dt / tau, "{} vs {}", s.i_r, exact);
    }

    #[test]
    fn step_contract() {
        let p = linear_params();
        assert!(ecm_step(EcmState { z: 0.5, i_r: 0.0 }, 1.0, 6.0, &p).is_err());
        let out = ecm_step(EcmState { z: 1.0, i_r: 0.0 }, 2.7, 5.0, &p).unwrap();
        assert!(out.violation.is_some());
    }

    #[test]
    fn voltage_substitution() {
        // OCV 3.7 V; a 2 A discharge with 1 A in the RC branch
        let p = EcmParams {
            ocv: MonotoneCubic::new(Table1d::new(vec![0.0, 0.5, 1.0], vec![3.0, 3.7, 4.2]).unwrap()),
            ..linear_params()
        };
        let s = EcmState { z: 0.5, i_r: -1.0 };
        assert_relative_eq!(ecm_voltage(&s, -2.0, &p), 3.66, max_relative = 1e-14);
        let rest = EcmState { z: 0.5, i_r: 0.0 };
        assert_eq!(ecm_voltage(&rest, 0.0, &p), 3.7);
    }

    #[test]
    fn stats_examples() {
        let n = 100;
        let v = vec![3.6; n];
        let z = vec![0.5; n];
        let i = vec![0.0; n];
        let st = profile_stats(&z, &v, &i, 5.0, 298.15, 500.0).unwrap();
        assert_relative_eq!(st.v_mean, 3.6, max_relative = 1e-14);
        assert_relative_eq!(st.v_rms, 3.6, max_relative = 1e-14);
        assert_eq!(st.soc_dev, 0.0);
        let sq: Vec<f64> = (0..n).map(|k| if k % 2 == 0 { 0.4 } else { 0.6 }).collect();
        let st = profile_stats(&sq, &v, &i, 5.0, 298.15, 500.0).unwrap();
        assert_relative_eq!(st.soc_dev, 0.2, max_relative = 1e-12);
        assert!(profile_stats(&[], &[], &[], 5.0, 298.15, 0.0).is_err());
    }

    fn stats(t_end_s: f64, ah: f64) -> ProfileStats {
        ProfileStats {
            v_mean: 3.7,
            v_rms: 3.72,
            soc_dev: 0.2,
            temperature_k: 298.15,
            t_end_s,
            ah_throughput: ah,
        }
    }

    #[test]
    fn degradation_structure() {
        let p = linear_params();
        let q = SchmalstiegParams::literature();
        assert_eq!(schmalstieg_lost_capacity(&stats(0.0, 0.0), &p, &q).unwrap(), 0.0);
        let cal_only = schmalstieg_lost_capacity(&stats(86_400.0 * 16.0, 0.0), &p, &q).unwrap();
        let expected = q.alpha(3.7, 298.15) * 16f64.powf(0.75) * p.e_ah;
        assert_eq!(cal_only, expected);
        assert!(schmalstieg_lost_capacity(&stats(-1.0, 0.0), &p, &q).is_err());
        assert!(schmalstieg_lost_capacity(&stats(1.0, -1.0), &p, &q).is_err());
    }

    #[test]
    fn calendar_regression_value() {
        // (7.543·3.7 − 23.75)·1e6·exp(−6976/298.15)·(100/24)^0.75·2.7, evaluated in
        // extended precision outside the crate
        let p = linear_params();
        let q = SchmalstiegParams::literature();
        let loss = schmalstieg_lost_capacity(&stats(100.0 * 3600.0, 0.0), &p, &q).unwrap();
        assert_relative_eq!(loss, CALENDAR_100H_AH, max_relative = 1e-12);
    }

    const CALENDAR_100H_AH: f64 = 0.002_258_125_248_729_727_7;

    #[test]
    fn halving_divisor_doubles_loss() {
        let p = linear_params();
        let mut q = SchmalstiegParams::literature();
        q.scale_divisor = 5.0;
        let a = schmalstieg_lost_capacity(&stats(3.0e6, 40.0), &p, &q).unwrap();
        q.scale_divisor = 2.5;
        let b = schmalstieg_lost_capacity(&stats(3.0e6, 40.0), &p, &q).unwrap();
        assert_relative_eq!(b, 2.0 * a, max_relative = 1e-14);
    }

    #[test]
    fn increment_from_zero_matches_total() {
        let p = linear_params();
        let q = SchmalstiegParams::literature();
        let st = stats(2.0 * 86_400.0, 12.0);
        let total = schmalstieg_lost_capacity(&st, &p, &q).unwrap();
        let inc = schmalstieg_increment(&st, 0.0, 0.0, &p, &q).unwrap();
        assert_relative_eq!(total, inc, max_relative = 1e-14);
        // later windows cost less for the same usage
        let later = schmalstieg_increment(&st, 200.0 * 86_400.0, 500.0, &p, &q).unwrap();
        assert!(later < inc);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn monotone_in_time_and_throughput(t in 0.0f64..1e8, dt in 0.0f64..1e7,
                                               q1 in 0.0f64..1e4, dq in 0.0f64..1e3) {
                let p = linear_params();
                let q = SchmalstiegParams::literature();
                let a = schmalstieg_lost_capacity(&stats(t, q1), &p, &q).unwrap();
                let b = schmalstieg_lost_capacity(&stats(t + dt, q1), &p, &q).unwrap();
                let c = schmalstieg_lost_capacity(&stats(t, q1 + dq), &p, &q).unwrap();
                prop_assert!(b >= a && c >= a);
            }

            #[test]
            fn euler_converges_first_order(tau_steps in 20usize..200) {
                // error at t = τ shrinks at least linearly with dt
                let p = linear_params();
                let tau = p.time_constant_s();
                let run = |dt: f64| {
                    let n = (tau / dt).round() as usize;
                    let mut s = EcmState { z: 0.5, i_r: 1.0 };
                    for _ in 0..n { s = ecm_step(s, 0.0, dt, &p).unwrap().state; }
                    (s.i_r - (-(n as f64) * dt / tau).exp()).abs()
                };
                let dt = tau / tau_steps as f64;
                prop_assume!(dt <= 5.0);
                let e1 = run(dt);
                let e2 = run(dt / 2.0);
                prop_assert!(e2 < 0.6 * e1);
            }
        }
    }
}
