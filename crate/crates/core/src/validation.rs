//! Replays committed profiles through the single-particle oracle, makes them
//! safe by global down-scaling or by holding the voltage at its limit, and books
//! revenue, degradation cost and lost capacity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::PriceSeries;
use crate::profile::{ControlProfile, ControlUnit};
use crate::spm::{euler, Spm, SpmEval, SpmState};

/// Resolution of the down-scaling bisection.
pub const SCALE_RESOLUTION: f64 = 1e-3;
/// Tolerance of the voltage-hold root find (V).
pub const HOLD_TOLERANCE_V: f64 = 1e-7;
/// Voltage excursion accepted by the accounting replay (V).
pub const ACCOUNTING_TOLERANCE_V: f64 = 1e-6;
const POWER_REL_TOL: f64 = 1e-12;
const MAX_LOGGED: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlaybackMode {
    Rescale,
    VoltageHold,
}

impl PlaybackMode {
    pub fn name(self) -> &'static str {
        match self {
            PlaybackMode::Rescale => "rescale",
            PlaybackMode::VoltageHold => "voltage_hold",
        }
    }
}

impl std::str::FromStr for PlaybackMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rescale" => Ok(PlaybackMode::Rescale),
            "voltage_hold" | "hold" => Ok(PlaybackMode::VoltageHold),
            other => Err(Error::Config(format!("unknown playback mode `{other}` (rescale, voltage_hold)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationEvent {
    pub time_s: f64,
    pub what: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerReport {
    pub mode: PlaybackMode,
    pub revenue: f64,
    pub degradation_cost: f64,
    pub profit: f64,
    pub lost_capacity_pct: f64,
    pub lost_capacity_ah: f64,
    pub lost_lithium_ah: f64,
    pub capacity_before_ah: f64,
    pub capacity_after_ah: f64,
    pub scale_factor: f64,
    /// Steps at which the voltage hold replaced the requested current.
    pub held_steps: usize,
    pub violations: Vec<ViolationEvent>,
    /// Running totals at every full hour of the replay.
    #[serde(skip)]
    pub hourly: Vec<HourlyLedger>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HourlyLedger {
    pub revenue: f64,
    pub lost_lithium_ah: f64,
}

/// Replay settings shared by every playback.
#[derive(Debug, Clone)]
pub struct Oracle {
    pub model: Spm,
    pub initial_state: SpmState,
    pub dt_s: f64,
}

impl Oracle {
    /// Oracle at `soc` with the side reaction on and 5-second steps.
    pub fn at_soc(model: Spm, soc: f64) -> Self {
        let initial_state = model.state_at_soc(soc);
        Self {
            model: model.with_side_reaction(true),
            initial_state,
            dt_s: 5.0,
        }
    }

    fn steps_per_interval(&self, profile: &ControlProfile) -> Result<usize> {
        let n = (profile.interval_s / self.dt_s).round();
        if !(n >= 1.0 && (n * self.dt_s - profile.interval_s).abs() <= 1e-9 * profile.interval_s) {
            return Err(Error::Config(format!(
                "replay step {} s must divide the profile interval {} s",
                self.dt_s, profile.interval_s
            )));
        }
        Ok(n as usize)
    }

    fn eval(&self, s: &SpmState, i: f64) -> Result<SpmEval> {
        self.model.evaluate(s, i, false)
    }

    fn voltage(&self, s: &SpmState, i: f64) -> Result<f64> {
        Ok(self.eval(s, i)?.voltage)
    }
}

/// Illinois false position on a sign-changing bracket; stops when `|f| ≤ tol`.
fn false_position(mut f: impl FnMut(f64) -> Result<f64>, mut a: f64, mut b: f64, tol: f64) -> Result<f64> {
    let mut fa = f(a)?;
    let mut fb = f(b)?;
    if fa.abs() <= tol {
        return Ok(a);
    }
    if fb.abs() <= tol {
        return Ok(b);
    }
    if fa.signum() == fb.signum() {
        return Err(Error::Domain(format!("root not bracketed in [{a}, {b}]")));
    }
    let mut side = 0;
    for _ in 0..200 {
        let c = (a * fb - b * fa) / (fb - fa);
        let c = if c.is_finite() && c > a.min(b) && c < a.max(b) { c } else { 0.5 * (a + b) };
        let fc = f(c)?;
        if fc.abs() <= tol || (b - a).abs() <= 1e-15 * (1.0 + c.abs()) {
            return Ok(c);
        }
        if fc.signum() == fb.signum() {
            b = c;
            fb = fc;
            if side == -1 {
                fa *= 0.5;
            }
            side = -1;
        } else {
            a = c;
            fa = fc;
            if side == 1 {
                fb *= 0.5;
            }
            side = 1;
        }
    }
    Err(Error::Domain("false position did not converge".into()))
}

/// Expands `[0, guess]` outward (doubling) until `f` changes sign, then solves.
fn root_from_zero(mut f: impl FnMut(f64) -> Result<f64>, guess: f64, limit: f64, tol: f64) -> Result<f64> {
    let f0 = f(0.0)?;
    if f0.abs() <= tol {
        return Ok(0.0);
    }
    let mut far = guess;
    loop {
        let ff = f(far)?;
        if ff.signum() != f0.signum() || ff.abs() <= tol {
            return false_position(&mut f, 0.0, far, tol);
        }
        if far.abs() >= limit {
            return Err(Error::Domain(format!("no root within |x| ≤ {limit}")));
        }
        far = (2.0 * far).clamp(-limit, limit);
    }
}

/// Current that draws power `p` (W, charge-positive) at state `s`.
fn current_for_power(o: &Oracle, s: &SpmState, p: f64) -> Result<f64> {
    if p == 0.0 {
        return Ok(0.0);
    }
    let v0 = o.voltage(s, 0.0)?;
    let limit = 20.0 * o.model.params().nominal_ah;
    root_from_zero(|i| Ok(i * o.voltage(s, i)? - p), 1.2 * p / v0, limit, POWER_REL_TOL * p.abs())
}

/// What the replay of one profile did.
#[derive(Debug, Clone)]
struct Execution {
    currents: Vec<f64>,
    held: usize,
    violations: Vec<ViolationEvent>,
}

#[derive(Clone, Copy)]
enum Policy {
    /// Scale the request and stop at the first violation.
    Scale(f64),
    Hold,
}

fn log_event(list: &mut Vec<ViolationEvent>, time_s: f64, what: &str, value: f64) {
    if list.len() < MAX_LOGGED {
        list.push(ViolationEvent {
            time_s,
            what: what.into(),
            value,
        });
    }
}

fn execute(profile: &ControlProfile, o: &Oracle, policy: Policy) -> Result<Execution> {
    let steps = o.steps_per_interval(profile)?;
    let (v_min, v_max) = (o.model.params().v_min, o.model.params().v_max);
    let one_c = o.model.params().nominal_ah;
    let mut s = o.initial_state;
    let mut currents = Vec::with_capacity(profile.len() * steps);
    let mut violations = Vec::new();
    let mut held = 0;
    for (k, &raw) in profile.values.iter().enumerate() {
        let request = match policy {
            Policy::Scale(c) => c * raw,
            Policy::Hold => raw,
        };
        for j in 0..steps {
            let t = (k * steps + j) as f64 * o.dt_s;
            let mut i = match profile.unit {
                ControlUnit::Current => request,
                ControlUnit::Power => match current_for_power(o, &s, request) {
                    Ok(i) => i,
                    Err(e) => match policy {
                        Policy::Scale(_) => {
                            log_event(&mut violations, t, "power_not_deliverable", request);
                            return Ok(Execution {
                                currents,
                                held,
                                violations,
                            });
                        }
                        Policy::Hold => {
                            return Err(Error::Hold {
                                time_s: t,
                                msg: format!("power {request} W not deliverable: {e}; state {s:?}"),
                            })
                        }
                    },
                },
            };
            let mut ev = o.eval(&s, i)?;
            let over = ev.voltage > v_max;
            let under = ev.voltage < v_min;
            match policy {
                Policy::Scale(_) => {
                    if over || under || ev.violation.is_some() {
                        let (what, value) = if over {
                            ("voltage_high", ev.voltage)
                        } else if under {
                            ("voltage_low", ev.voltage)
                        } else {
                            ("concentration", ev.violation.unwrap_or(0.0))
                        };
                        log_event(&mut violations, t, what, value);
                        return Ok(Execution {
                            currents,
                            held,
                            violations,
                        });
                    }
                }
                Policy::Hold => {
                    if over || under {
                        let limit = if over { v_max } else { v_min };
                        let f = |x: f64| Ok(o.voltage(&s, x)? - limit);
                        // V rises with the current: the hold current lies between zero
                        // (or beyond it, when the rest voltage is already past the limit)
                        // and the request
                        let lo = if over { -one_c } else { i };
                        let hi = if over { i } else { one_c };
                        let lo = if over && f(0.0)? <= 0.0 { 0.0 } else { lo };
                        let hi = if under && f(0.0)? >= 0.0 { 0.0 } else { hi };
                        i = false_position(f, lo, hi, HOLD_TOLERANCE_V).map_err(|e| Error::Hold {
                            time_s: t,
                            msg: format!("{e}; requested {i} A, state {s:?}"),
                        })?;
                        ev = o.eval(&s, i)?;
                        held += 1;
                    }
                    if let Some(v) = ev.violation {
                        log_event(&mut violations, t, "concentration", v);
                    }
                }
            }
            currents.push(i);
            s = euler(&s, &ev, o.dt_s);
        }
    }
    Ok(Execution {
        currents,
        held,
        violations,
    })
}

/// True when `c·profile` replays without voltage or concentration violations.
pub fn replay_is_safe(profile: &ControlProfile, oracle: &Oracle, c: f64) -> Result<bool> {
    let ex = execute(profile, oracle, Policy::Scale(c))?;
    Ok(ex.violations.is_empty())
}

/// Largest `c ∈ (0, 1]` (to within [`SCALE_RESOLUTION`]) for which `c·profile`
/// replays without violations; returns the scaled profile and `c`.
pub fn rescale_profile(profile: &ControlProfile, oracle: &Oracle) -> Result<(ControlProfile, f64)> {
    if replay_is_safe(profile, oracle, 1.0)? {
        return Ok((profile.clone(), 1.0));
    }
    if !replay_is_safe(profile, oracle, SCALE_RESOLUTION)? {
        return Err(Error::DegenerateProfile(SCALE_RESOLUTION));
    }
    let (mut safe, mut unsafe_) = (SCALE_RESOLUTION, 1.0);
    while unsafe_ - safe > SCALE_RESOLUTION {
        let mid = 0.5 * (safe + unsafe_);
        if replay_is_safe(profile, oracle, mid)? {
            safe = mid;
        } else {
            unsafe_ = mid;
        }
    }
    Ok((profile.scaled(safe), safe))
}

/// Replays `profile`, substituting at each step that would cross a voltage limit
/// the current holding the voltage at that limit. Returns the executed currents,
/// one per replay step, and the number of held steps.
pub fn voltage_hold_playback(profile: &ControlProfile, oracle: &Oracle) -> Result<(ControlProfile, usize)> {
    let ex = execute(profile, oracle, Policy::Hold)?;
    Ok((ControlProfile::new(ControlUnit::Current, oracle.dt_s, ex.currents)?, ex.held))
}

/// Revenue and capacity bookkeeping of an executed current profile.
pub fn account(executed: &ControlProfile, prices: &PriceSeries, oracle: &Oracle, lambda_degr_ah: f64) -> Result<LedgerReport> {
    if executed.unit != ControlUnit::Current {
        return Err(Error::Config("accounting needs an executed current profile".into()));
    }
    let steps = oracle.steps_per_interval(executed)?;
    let p = oracle.model.params();
    let n_cells = p.n_cells;
    let mut s = oracle.initial_state;
    let mut revenue = 0.0;
    let mut hourly = Vec::new();
    for (k, &i) in executed.values.iter().enumerate() {
        for j in 0..steps {
            let t = (k * steps + j) as f64 * oracle.dt_s;
            let ev = oracle.eval(&s, i)?;
            if ev.voltage > p.v_max + ACCOUNTING_TOLERANCE_V || ev.voltage < p.v_min - ACCOUNTING_TOLERANCE_V {
                return Err(Error::Replay {
                    time_s: t,
                    msg: format!("voltage {:.6} V outside [{}, {}]; run a safety pass first", ev.voltage, p.v_min, p.v_max),
                });
            }
            if let Some(v) = ev.violation {
                return Err(Error::Replay {
                    time_s: t,
                    msg: format!("concentration bound exceeded by {v:.3e}"),
                });
            }
            revenue -= n_cells * i * ev.voltage * prices.price_at(t)? * oracle.dt_s / 3600.0;
            s = euler(&s, &ev, oracle.dt_s);
            if ((t + oracle.dt_s) / 3600.0).fract().abs() < 1e-9 {
                hourly.push(HourlyLedger {
                    revenue,
                    lost_lithium_ah: s.lost_li_ah - oracle.initial_state.lost_li_ah,
                });
            }
        }
    }
    let before = oracle.model.measure_capacity(&oracle.initial_state)?;
    let after = oracle.model.measure_capacity(&s)?;
    let lost = (before - after).max(0.0);
    let degradation_cost = lost * lambda_degr_ah * n_cells;
    Ok(LedgerReport {
        mode: PlaybackMode::Rescale,
        revenue,
        degradation_cost,
        profit: revenue - degradation_cost,
        lost_capacity_pct: 100.0 * lost / before,
        lost_capacity_ah: lost,
        lost_lithium_ah: s.lost_li_ah - oracle.initial_state.lost_li_ah,
        capacity_before_ah: before,
        capacity_after_ah: after,
        scale_factor: 1.0,
        held_steps: 0,
        violations: Vec::new(),
        hourly,
    })
}

/// Makes `profile` safe with the chosen playback and books it.
pub fn validate_profile(
    profile: &ControlProfile,
    prices: &PriceSeries,
    oracle: &Oracle,
    mode: PlaybackMode,
) -> Result<(ControlProfile, LedgerReport)> {
    let lambda = oracle.model.params().lambda_degr_ah;
    match mode {
        PlaybackMode::Rescale => {
            let first = execute(profile, oracle, Policy::Scale(1.0))?;
            let (safe, c) = rescale_profile(profile, oracle)?;
            let executed = execute(&safe, oracle, Policy::Scale(1.0))?;
            let executed = ControlProfile::new(ControlUnit::Current, oracle.dt_s, executed.currents)?;
            let mut report = account(&executed, prices, oracle, lambda)?;
            report.scale_factor = c;
            report.violations = first.violations;
            Ok((executed, report))
        }
        PlaybackMode::VoltageHold => {
            let ex = execute(profile, oracle, Policy::Hold)?;
            let executed = ControlProfile::new(ControlUnit::Current, oracle.dt_s, ex.currents)?;
            let mut report = account(&executed, prices, oracle, lambda)?;
            report.mode = PlaybackMode::VoltageHold;
            report.held_steps = ex.held;
            report.violations = ex.violations;
            Ok((executed, report))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_spm;

    fn oracle() -> Oracle {
        Oracle::at_soc(default_spm().unwrap(), 0.5)
    }

    fn flat_prices(hours: usize) -> PriceSeries {
        PriceSeries::from_eur_per_mwh(&vec![50.0; hours]).unwrap()
    }

    #[test]
    fn false_position_solves_cubic() {
        let r = false_position(|x| Ok(x * x * x - 2.0), 0.0, 2.0, 1e-14).unwrap();
        assert!((r - 2f64.cbrt()).abs() < 1e-12);
    }

    #[test]
    fn safe_and_zero_profiles_keep_scale_one() {
        let o = oracle();
        let zero = ControlProfile::zeros(ControlUnit::Current, 900.0, 8);
        let (p, c) = rescale_profile(&zero, &o).unwrap();
        assert_eq!(c, 1.0);
        assert_eq!(p, zero);
        let gentle = ControlProfile::new(ControlUnit::Current, 900.0, vec![0.5, -0.5, 0.5, -0.5]).unwrap();
        assert_eq!(rescale_profile(&gentle, &o).unwrap().1, 1.0);
    }

    #[test]
    fn overcharge_is_scaled_down_and_then_safe() {
        let o = oracle();
        // 1C for four hours from half charge runs into the upper limit
        let p = ControlProfile::new(ControlUnit::Current, 3600.0, vec![2.7; 4]).unwrap();
        let (safe, c) = rescale_profile(&p, &o).unwrap();
        assert!(c < 1.0 && c > 0.1, "c = {c}");
        assert!(replay_is_safe(&safe, &o, 1.0).unwrap());
        assert!(!replay_is_safe(&p, &o, c + SCALE_RESOLUTION).unwrap());
    }

    #[test]
    fn hold_pins_voltage_and_tapers() {
        let o = oracle();
        let p = ControlProfile::new(ControlUnit::Current, 3600.0, vec![2.7; 4]).unwrap();
        let (exec, held) = voltage_hold_playback(&p, &o).unwrap();
        assert!(held > 0);
        let v_max = o.model.params().v_max;
        let mut s = o.initial_state;
        let mut last_held = f64::INFINITY;
        for &i in &exec.values {
            let ev = o.model.evaluate(&s, i, false).unwrap();
            assert!(ev.voltage <= v_max + 1e-6);
            if i < 2.7 {
                assert!((ev.voltage - v_max).abs() < 1e-6);
                assert!(i <= last_held + 1e-9);
                last_held = i;
            }
            s = euler(&s, &ev, o.dt_s);
        }
        assert!(last_held < 0.5 * 2.7);
    }

    #[test]
    fn safe_request_executes_unchanged() {
        let o = oracle();
        let p = ControlProfile::new(ControlUnit::Current, 900.0, vec![1.0, -1.0]).unwrap();
        let (exec, held) = voltage_hold_playback(&p, &o).unwrap();
        assert_eq!(held, 0);
        assert!(exec.values[..180].iter().all(|v| *v == 1.0));
        assert!(exec.values[180..].iter().all(|v| *v == -1.0));
    }

    #[test]
    fn power_requests_draw_matching_current() {
        let o = oracle();
        let s = o.initial_state;
        for p in [10.0, -10.0, 3.0] {
            let i = current_for_power(&o, &s, p).unwrap();
            let v = o.model.evaluate(&s, i, false).unwrap().voltage;
            assert!((i * v - p).abs() < 1e-9);
        }
    }

    #[test]
    fn rest_day_costs_but_earns_nothing() {
        let o = oracle();
        let zero = ControlProfile::zeros(ControlUnit::Current, 900.0, 96);
        let (_, r) = validate_profile(&zero, &flat_prices(24), &o, PlaybackMode::Rescale).unwrap();
        assert_eq!(r.revenue, 0.0);
        assert!(r.degradation_cost > 0.0);
        assert_eq!(r.profit, r.revenue - r.degradation_cost);
        // lost capacity tracks lost lithium
        assert!((r.lost_capacity_ah - r.lost_lithium_ah).abs() <= 0.1 * r.lost_lithium_ah);
    }

    #[test]
    fn unsafe_profile_refused_by_accounting() {
        let o = oracle();
        let p = ControlProfile::new(ControlUnit::Current, 3600.0, vec![2.7; 4]).unwrap();
        let mut steps = Vec::new();
        for v in &p.values {
            steps.extend(std::iter::repeat(*v).take(720));
        }
        let exec = ControlProfile::new(ControlUnit::Current, 5.0, steps).unwrap();
        assert!(matches!(account(&exec, &flat_prices(4), &o, 1.0), Err(Error::Replay { .. })));
    }
}
