//! Calendar and cycle ageing protocols run on any of the three models, scored
//! against measured relative-capacity series.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ecm::{ecm_step, ecm_voltage, profile_stats, schmalstieg_lost_capacity, EcmState, ProfileStats};
use crate::error::{Error, Result};
use crate::model::{BatteryModel, EcmModel};
use crate::spm::{euler, Spm, SpmState};

/// Step used by every protocol simulation (s).
pub const PROTOCOL_STEP_S: f64 = 5.0;
/// Discharge rate of cycle protocols (C).
pub const DISCHARGE_C_RATE: f64 = 1.0;
const AXIS_TOLERANCE: f64 = 1e-9;

fn default_cycle_temperature() -> f64 {
    318.15
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AgingProtocol {
    Calendar {
        soc: f64,
        temperature_k: f64,
        duration_days: f64,
        checkup_days: f64,
    },
    /// Constant-current cycling between two states of charge; each phase lasts
    /// exactly as long as the window needs at its rate, so the throughput per
    /// cycle is `2·(hi − lo)` capacities.
    Cycle {
        soc_lo: f64,
        soc_hi: f64,
        charge_c_rate: f64,
        #[serde(default = "default_cycle_temperature")]
        temperature_k: f64,
        n_cycles: usize,
        checkup_cycles: usize,
    },
}

impl AgingProtocol {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AgingProtocol::Calendar {
                soc,
                temperature_k,
                duration_days,
                checkup_days,
            } => {
                if !(0.0..=1.0).contains(&soc) {
                    return Err(Error::Protocol(format!("calendar soc {soc} outside [0, 1]")));
                }
                if !(temperature_k > 0.0 && duration_days >= 0.0 && checkup_days > 0.0) {
                    return Err(Error::Protocol(
                        "calendar protocol needs T > 0, duration ≥ 0 and checkup interval > 0".into(),
                    ));
                }
            }
            AgingProtocol::Cycle {
                soc_lo,
                soc_hi,
                charge_c_rate,
                temperature_k,
                checkup_cycles,
                ..
            } => {
                if !(0.0 <= soc_lo && soc_lo < soc_hi && soc_hi <= 1.0) {
                    return Err(Error::Protocol(format!("soc window [{soc_lo}, {soc_hi}] invalid")));
                }
                if !(charge_c_rate > 0.0 && temperature_k > 0.0 && checkup_cycles >= 1) {
                    return Err(Error::Protocol(
                        "cycle protocol needs a positive rate and temperature and a checkup every ≥ 1 cycles".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn axis(&self) -> Axis {
        match self {
            AgingProtocol::Calendar { .. } => Axis::Days,
            AgingProtocol::Cycle { .. } => Axis::FullCycles,
        }
    }

    /// Axis values of the checkups, starting at 0 and always ending at the
    /// protocol's end.
    pub fn checkups(&self) -> Vec<f64> {
        match *self {
            AgingProtocol::Calendar {
                duration_days,
                checkup_days,
                ..
            } => {
                let mut v = vec![0.0];
                let mut k = 1.0;
                while k * checkup_days < duration_days - 1e-12 {
                    v.push(k * checkup_days);
                    k += 1.0;
                }
                if duration_days > 0.0 {
                    v.push(duration_days);
                }
                v
            }
            AgingProtocol::Cycle {
                soc_lo,
                soc_hi,
                n_cycles,
                checkup_cycles,
                ..
            } => self::cycle_checkpoints(n_cycles, checkup_cycles)
                .into_iter()
                .map(|n| n as f64 * (soc_hi - soc_lo))
                .collect(),
        }
    }
}

fn cycle_checkpoints(n_cycles: usize, every: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n_cycles).step_by(every).collect();
    v.push(n_cycles);
    v.dedup();
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Days,
    /// Charge throughput divided by twice the capacity.
    FullCycles,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Days => "days",
            Axis::FullCycles => "full_cycles",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasuredSeries {
    pub axis: Axis,
    /// (axis value, remaining capacity relative to the start)
    pub points: Vec<(f64, f64)>,
}

impl MeasuredSeries {
    pub fn new(axis: Axis, points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Schema("series has no points".into()));
        }
        if points.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::Schema("series axis values must increase strictly".into()));
        }
        if let Some((x, c)) = points.iter().find(|(_, c)| !(*c > 0.0 && *c <= 1.1)) {
            return Err(Error::Range(format!("relative capacity {c} at {x} outside (0, 1.1]")));
        }
        Ok(Self { axis, points })
    }

    /// Linear interpolation between points; errors outside the span.
    pub fn value_at(&self, x: f64) -> Result<f64> {
        let (x0, xn) = (self.points[0].0, self.points[self.points.len() - 1].0);
        let tol = AXIS_TOLERANCE * xn.abs().max(1.0);
        if x < x0 - tol || x > xn + tol {
            return Err(Error::Extrapolation(format!(
                "{} = {x} outside the simulated span [{x0}, {xn}]",
                self.axis.name()
            )));
        }
        let i = self.points.partition_point(|p| p.0 < x);
        if i == 0 {
            return Ok(self.points[0].1);
        }
        if i == self.points.len() {
            return Ok(self.points[i - 1].1);
        }
        let (xa, ya) = self.points[i - 1];
        let (xb, yb) = self.points[i];
        Ok(ya + (yb - ya) * (x - xa) / (xb - xa))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let parse = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::Reader::from_reader(file);
        let headers = rdr.headers().map_err(|e| parse(1, e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["axis", "value", "relative_capacity"] {
            return Err(Error::Schema(format!(
                "{}: expected header axis,value,relative_capacity",
                path.display()
            )));
        }
        let mut axis = None;
        let mut points = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| parse(line + 2, e.to_string()))?;
            let bad = || parse(line + 2, "expected axis,value,relative_capacity".into());
            let a = match rec.get(0).map(str::trim) {
                Some("days") => Axis::Days,
                Some("full_cycles") => Axis::FullCycles,
                _ => return Err(bad()),
            };
            if axis.is_some_and(|prev| prev != a) {
                return Err(Error::Schema(format!("{}: mixed axis kinds", path.display())));
            }
            axis = Some(a);
            let x: f64 = rec.get(1).and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?;
            let c: f64 = rec.get(2).and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?;
            points.push((x, c));
        }
        let axis = axis.ok_or_else(|| Error::Schema(format!("{}: no rows", path.display())))?;
        Self::new(axis, points)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = String::from("axis,value,relative_capacity\n");
        for (x, c) in &self.points {
            let _ = writeln!(s, "{},{x},{c}", self.axis.name());
        }
        std::fs::write(path.as_ref(), s).map_err(|e| Error::io(path.as_ref(), e))
    }
}

/// Root mean square of `sim − meas` at the measured points, in percent.
pub fn rmse(sim: &MeasuredSeries, meas: &MeasuredSeries) -> Result<f64> {
    if sim.axis != meas.axis {
        return Err(Error::Schema(format!(
            "series use different axes ({} vs {})",
            sim.axis.name(),
            meas.axis.name()
        )));
    }
    let mut acc = 0.0;
    for &(x, m) in &meas.points {
        let d = sim.value_at(x)? - m;
        acc += d * d;
    }
    Ok(100.0 * (acc / meas.points.len() as f64).sqrt())
}

/// Simulates `protocol` on `model` and reports relative capacity at each checkup.
pub fn run_protocol(protocol: &AgingProtocol, model: &BatteryModel) -> Result<MeasuredSeries> {
    protocol.validate()?;
    let axis = protocol.axis();
    let xs = protocol.checkups();
    let caps = match model {
        BatteryModel::Bucket(p) => match *protocol {
            // the empirical bucket law has no calendar term
            AgingProtocol::Calendar { .. } => vec![1.0; xs.len()],
            AgingProtocol::Cycle {
                soc_lo,
                soc_hi,
                charge_c_rate,
                n_cycles,
                checkup_cycles,
                ..
            } => {
                let peak = p.e_wh * charge_c_rate.max(DISCHARGE_C_RATE);
                cycle_checkpoints(n_cycles, checkup_cycles)
                    .into_iter()
                    .map(|n| {
                        if n == 0 {
                            return 1.0;
                        }
                        let thr = 2.0 * (soc_hi - soc_lo) * p.e_wh * n as f64;
                        1.0 - (p.k_power * peak + p.k_throughput * thr) / p.e_wh
                    })
                    .collect()
            }
        },
        BatteryModel::Ecm(m) => ecm_protocol(protocol, m)?,
        BatteryModel::Spm(m) => spm_protocol(protocol, m)?,
    };
    Ok(MeasuredSeries {
        axis,
        points: xs.into_iter().zip(caps).collect(),
    })
}

/// Sequence of constant-current phases `(current as C-rate, duration s)` of one cycle.
fn cycle_phases(soc_lo: f64, soc_hi: f64, charge_c_rate: f64) -> [(f64, f64); 2] {
    let w = soc_hi - soc_lo;
    [
        (charge_c_rate, 3600.0 * w / charge_c_rate),
        (-DISCHARGE_C_RATE, 3600.0 * w / DISCHARGE_C_RATE),
    ]
}

/// Splits `duration` into full steps plus one shorter remainder.
fn steps_of(duration: f64) -> impl Iterator<Item = f64> {
    let full = (duration / PROTOCOL_STEP_S).floor() as usize;
    let rest = duration - full as f64 * PROTOCOL_STEP_S;
    std::iter::repeat(PROTOCOL_STEP_S)
        .take(full)
        .chain((rest > 1e-9).then_some(rest))
}

fn ecm_protocol(protocol: &AgingProtocol, m: &EcmModel) -> Result<Vec<f64>> {
    let mut p = m.params.clone();
    let q = &m.degradation;
    match *protocol {
        AgingProtocol::Calendar {
            soc,
            temperature_k,
            ..
        } => {
            p.temperature_k = temperature_k;
            let v = ecm_voltage(&EcmState { z: soc, i_r: 0.0 }, 0.0, &p);
            protocol
                .checkups()
                .into_iter()
                .map(|days| {
                    let stats = ProfileStats {
                        v_mean: v,
                        v_rms: v,
                        soc_dev: 0.0,
                        temperature_k,
                        t_end_s: days * 86_400.0,
                        ah_throughput: 0.0,
                    };
                    Ok(1.0 - schmalstieg_lost_capacity(&stats, &p, q)? / p.e_ah)
                })
                .collect()
        }
        AgingProtocol::Cycle {
            soc_lo,
            soc_hi,
            charge_c_rate,
            temperature_k,
            n_cycles,
            checkup_cycles,
        } => {
            p.temperature_k = temperature_k;
            // one simulated cycle fixes the statistics; the law scales time and throughput
            let mut s = EcmState { z: soc_lo, i_r: 0.0 };
            let (mut soc, mut volt, mut cur, mut weights) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            let mut elapsed = 0.0;
            for (rate, duration) in cycle_phases(soc_lo, soc_hi, charge_c_rate) {
                let i = rate * p.e_ah;
                for dt in steps_of(duration) {
                    let v = ecm_voltage(&s, i, &p);
                    if v > p.v_max || v < p.v_min {
                        return Err(Error::Protocol(format!(
                            "soc window [{soc_lo}, {soc_hi}] unreachable: {v:.4} V at {rate}C"
                        )));
                    }
                    soc.push(s.z);
                    volt.push(v);
                    cur.push(i);
                    weights.push(dt);
                    s = ecm_step(s, i, dt, &p)?.state;
                    elapsed += dt;
                }
            }
            // profile_stats wants uniform samples; weight the remainder steps by repetition
            let base = weighted_stats(&soc, &volt, &cur, &weights, temperature_k, elapsed)?;
            cycle_checkpoints(n_cycles, checkup_cycles)
                .into_iter()
                .map(|n| {
                    if n == 0 {
                        return Ok(1.0);
                    }
                    let stats = ProfileStats {
                        t_end_s: base.t_end_s * n as f64,
                        ah_throughput: base.ah_throughput * n as f64,
                        ..base
                    };
                    Ok(1.0 - schmalstieg_lost_capacity(&stats, &p, q)? / p.e_ah)
                })
                .collect()
        }
    }
}

/// Statistics of a sampled trajectory with per-sample durations.
fn weighted_stats(soc: &[f64], volt: &[f64], cur: &[f64], dt: &[f64], temperature_k: f64, span: f64) -> Result<ProfileStats> {
    if dt.iter().all(|d| (d - dt[0]).abs() < 1e-12) {
        return profile_stats(soc, volt, cur, dt[0], temperature_k, span);
    }
    let v_mean = volt.iter().zip(dt).map(|(v, d)| v * d).sum::<f64>() / span;
    let v_rms = (volt.iter().zip(dt).map(|(v, d)| v * v * d).sum::<f64>() / span).sqrt();
    let z_mean = soc.iter().zip(dt).map(|(z, d)| z * d).sum::<f64>() / span;
    let soc_dev = 2.0 * soc.iter().zip(dt).map(|(z, d)| (z - z_mean).abs() * d).sum::<f64>() / span;
    let ah_throughput = cur.iter().zip(dt).map(|(i, d)| i.abs() * d).sum::<f64>() / 3600.0;
    Ok(ProfileStats {
        v_mean,
        v_rms,
        soc_dev,
        temperature_k,
        t_end_s: span,
        ah_throughput,
    })
}

/// The oracle at a protocol temperature: ambient and initial cell temperature.
fn spm_at_temperature(m: &Spm, temperature_k: f64) -> Result<Spm> {
    let mut params = m.params().clone();
    params.thermal.t_env = temperature_k;
    Ok(Spm::new(params)?.with_side_reaction(true))
}

fn spm_advance(m: &Spm, s: &mut SpmState, current_a: f64, duration: f64, check: Option<(f64, f64)>) -> Result<()> {
    for dt in steps_of(duration) {
        let ev = m.evaluate(s, current_a, false)?;
        if let Some((lo, hi)) = check {
            if ev.voltage > hi || ev.voltage < lo || ev.violation.is_some() {
                return Err(Error::Protocol(format!(
                    "soc window unreachable: {:.4} V at {current_a:.3} A",
                    ev.voltage
                )));
            }
        }
        *s = euler(s, &ev, dt);
    }
    Ok(())
}

fn spm_protocol(protocol: &AgingProtocol, m: &Spm) -> Result<Vec<f64>> {
    match *protocol {
        AgingProtocol::Calendar {
            soc,
            temperature_k,
            ..
        } => {
            let model = spm_at_temperature(m, temperature_k)?;
            let mut s = model.state_at_soc(soc);
            let q0 = model.measure_capacity(&s)?;
            let mut out = vec![1.0];
            let xs = protocol.checkups();
            for w in xs.windows(2) {
                spm_advance(&model, &mut s, 0.0, (w[1] - w[0]) * 86_400.0, None)?;
                out.push(model.measure_capacity(&s)? / q0);
            }
            Ok(out)
        }
        AgingProtocol::Cycle {
            soc_lo,
            soc_hi,
            charge_c_rate,
            temperature_k,
            n_cycles,
            checkup_cycles,
        } => {
            let model = spm_at_temperature(m, temperature_k)?;
            let p = model.params();
            let limits = Some((p.v_min, p.v_max));
            let one_c = p.nominal_ah;
            let mut s = model.state_at_soc(soc_lo);
            let q0 = model.measure_capacity(&s)?;
            let marks = cycle_checkpoints(n_cycles, checkup_cycles);
            let mut out = vec![1.0];
            let mut done = 0;
            for &target in &marks[1..] {
                while done < target {
                    for (rate, duration) in cycle_phases(soc_lo, soc_hi, charge_c_rate) {
                        spm_advance(&model, &mut s, rate * one_c, duration, limits)?;
                    }
                    done += 1;
                }
                out.push(model.measure_capacity(&s)? / q0);
            }
            Ok(out)
        }
    }
}

/// One measured dataset and the protocol that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub protocol: AgingProtocol,
    /// Absent when no measurement exists; the cell becomes n/a.
    pub measured: Option<MeasuredSeries>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    name: String,
    protocol: AgingProtocol,
}

impl Dataset {
    /// Reads `<stem>.toml` and the measurements in `<stem>.csv` (if present).
    pub fn load(sidecar: impl AsRef<Path>) -> Result<Self> {
        let path = sidecar.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let meta: Sidecar = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        meta.protocol.validate()?;
        let csv_path = path.with_extension("csv");
        let measured = if csv_path.exists() {
            let m = MeasuredSeries::load_csv(&csv_path)?;
            if m.axis != meta.protocol.axis() {
                return Err(Error::Schema(format!(
                    "{}: axis {} does not match a {} protocol",
                    csv_path.display(),
                    m.axis.name(),
                    meta.protocol.axis().name()
                )));
            }
            Some(m)
        } else {
            None
        };
        Ok(Self {
            name: meta.name,
            protocol: meta.protocol,
            measured,
        })
    }

    /// Every `*.toml` sidecar in `dir`, sorted by file name.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Vec<Self>> {
        let dir = dir.as_ref();
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Config(format!("{}: no dataset descriptors", dir.display())));
        }
        paths.iter().map(Self::load).collect()
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = Sidecar {
            name: self.name.clone(),
            protocol: self.protocol.clone(),
        };
        let toml_path = dir.join(format!("{}.toml", self.name));
        let text = toml::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(&toml_path, text).map_err(|e| Error::io(&toml_path, e))?;
        if let Some(m) = &self.measured {
            m.write_csv(dir.join(format!("{}.csv", self.name)))?;
        }
        Ok(())
    }
}

/// Protocols of the shipped synthetic fixtures.
pub fn synthetic_protocols() -> Vec<(String, AgingProtocol)> {
    vec![
        (
            "calendar_25c_soc50".into(),
            AgingProtocol::Calendar {
                soc: 0.5,
                temperature_k: 298.15,
                duration_days: 60.0,
                checkup_days: 10.0,
            },
        ),
        (
            "calendar_45c_soc80".into(),
            AgingProtocol::Calendar {
                soc: 0.8,
                temperature_k: 318.15,
                duration_days: 60.0,
                checkup_days: 10.0,
            },
        ),
        (
            "cycle_20_80_c2".into(),
            AgingProtocol::Cycle {
                soc_lo: 0.2,
                soc_hi: 0.8,
                charge_c_rate: 0.5,
                temperature_k: 318.15,
                n_cycles: 200,
                checkup_cycles: 50,
            },
        ),
        (
            "cycle_10_70_1c".into(),
            AgingProtocol::Cycle {
                soc_lo: 0.1,
                soc_hi: 0.7,
                charge_c_rate: 1.0,
                temperature_k: 318.15,
                n_cycles: 200,
                checkup_cycles: 50,
            },
        ),
    ]
}

/// Generates measurement fixtures from the single-particle model itself.
pub fn synthesize_fixtures(spm: &Spm) -> Result<Vec<Dataset>> {
    let model = BatteryModel::Spm(spm.clone());
    synthetic_protocols()
        .into_iter()
        .map(|(name, protocol)| {
            let measured = run_protocol(&protocol, &model)?;
            Ok(Dataset {
                name,
                protocol,
                measured: Some(measured),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model: String,
    /// RMSE (%) per dataset; `None` when the cell is unavailable.
    pub cells: Vec<Option<f64>>,
    pub average: Option<f64>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub columns: Vec<String>,
    pub rows: Vec<BenchRow>,
}

impl BenchTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model");
        for c in &self.columns {
            let _ = write!(s, ",{c}");
        }
        s.push_str(",average\n");
        let cell = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.6}"));
        for r in &self.rows {
            s.push_str(&r.model);
            for c in &r.cells {
                let _ = write!(s, ",{}", cell(*c));
            }
            let _ = writeln!(s, ",{}", cell(r.average));
        }
        s
    }
}

/// RMSE of every model on every dataset, plus each model's mean over its
/// available cells.
pub fn benchmark_table(datasets: &[Dataset], models: &[(String, BatteryModel)]) -> BenchTable {
    let columns = datasets.iter().map(|d| d.name.clone()).collect();
    let rows = models
        .iter()
        .map(|(name, model)| {
            let mut notes = Vec::new();
            let cells: Vec<Option<f64>> = datasets
                .iter()
                .map(|d| {
                    let meas = d.measured.as_ref()?;
                    match run_protocol(&d.protocol, model).and_then(|sim| rmse(&sim, meas)) {
                        Ok(v) => Some(v),
                        Err(e) => {
                            notes.push(format!("{}: {e}", d.name));
                            None
                        }
                    }
                })
                .collect();
            let avail: Vec<f64> = cells.iter().flatten().copied().collect();
            let average = (!avail.is_empty()).then(|| avail.iter().sum::<f64>() / avail.len() as f64);
            BenchRow {
                model: name.clone(),
                cells,
                average,
                notes,
            }
        })
        .collect();
    BenchTable { columns, rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{default_spm, load_model};
    use crate::model::ModelKind;

    fn series(points: &[(f64, f64)]) -> MeasuredSeries {
        MeasuredSeries::new(Axis::Days, points.to_vec()).unwrap()
    }

    #[test]
    fn rmse_examples() {
        let a = series(&[(0.0, 1.0), (10.0, 0.9)]);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        let b = series(&[(0.0, 0.95), (10.0, 0.85)]);
        assert!((rmse(&a, &b).unwrap() - 5.0).abs() < 1e-12);
        let c = series(&[(0.0, 0.97), (10.0, 0.94)]);
        assert!((rmse(&a, &c).unwrap() - 3.5355339059327378).abs() < 1e-12);
    }

    #[test]
    fn rmse_interpolates_and_refuses_extrapolation() {
        let sim = series(&[(0.0, 1.0), (10.0, 0.9)]);
        let meas = series(&[(5.0, 0.95)]);
        assert!(rmse(&sim, &meas).unwrap() < 1e-12);
        let late = series(&[(11.0, 0.9)]);
        assert!(matches!(rmse(&sim, &late), Err(Error::Extrapolation(_))));
    }

    #[test]
    fn series_invariants() {
        assert!(MeasuredSeries::new(Axis::Days, vec![(1.0, 1.0), (1.0, 0.9)]).is_err());
        assert!(MeasuredSeries::new(Axis::Days, vec![(0.0, 1.2)]).is_err());
    }

    #[test]
    fn zero_duration_is_one_point() {
        let p = AgingProtocol::Calendar {
            soc: 0.5,
            temperature_k: 298.15,
            duration_days: 0.0,
            checkup_days: 10.0,
        };
        for kind in [ModelKind::Bucket, ModelKind::Ecm, ModelKind::Spm] {
            let s = run_protocol(&p, &load_model(kind, None).unwrap()).unwrap();
            assert_eq!(s.points, vec![(0.0, 1.0)]);
        }
    }

    #[test]
    fn bucket_calendar_is_flat() {
        let p = &synthetic_protocols()[0].1;
        let s = run_protocol(p, &load_model(ModelKind::Bucket, None).unwrap()).unwrap();
        assert!(s.points.iter().all(|(_, c)| *c == 1.0));
    }

    #[test]
    fn warmer_spm_fades_faster() {
        let spm = BatteryModel::Spm(default_spm().unwrap());
        let at = |t: f64| {
            let p = AgingProtocol::Calendar {
                soc: 0.5,
                temperature_k: t,
                duration_days: 10.0,
                checkup_days: 10.0,
            };
            run_protocol(&p, &spm).unwrap().points[1].1
        };
        let (cool, warm) = (at(298.15), at(318.15));
        assert!(warm < cool && cool < 1.0, "{warm} vs {cool}");
    }

    #[test]
    fn cycle_axis_counts_full_cycles() {
        let p = AgingProtocol::Cycle {
            soc_lo: 0.2,
            soc_hi: 0.8,
            charge_c_rate: 0.5,
            temperature_k: 318.15,
            n_cycles: 10,
            checkup_cycles: 4,
        };
        let xs: Vec<f64> = p.checkups();
        assert_eq!(xs.len(), 4);
        assert!((xs[3] - 6.0).abs() < 1e-12);
        let ecm = run_protocol(&p, &load_model(ModelKind::Ecm, None).unwrap()).unwrap();
        assert!(ecm.points.windows(2).all(|w| w[1].1 < w[0].1));
    }

    #[test]
    fn unreachable_window_is_a_protocol_error() {
        let p = AgingProtocol::Cycle {
            soc_lo: 0.1,
            soc_hi: 1.0,
            charge_c_rate: 2.0,
            temperature_k: 298.15,
            n_cycles: 1,
            checkup_cycles: 1,
        };
        let ecm = load_model(ModelKind::Ecm, None).unwrap();
        assert!(matches!(run_protocol(&p, &ecm), Err(Error::Protocol(_))));
    }

    #[test]
    fn table_average_and_missing_cells() {
        let p = AgingProtocol::Calendar {
            soc: 0.5,
            temperature_k: 298.15,
            duration_days: 2.0,
            checkup_days: 1.0,
        };
        let meas = series(&[(0.0, 1.0), (2.0, 0.99)]);
        let datasets = vec![
            Dataset {
                name: "a".into(),
                protocol: p.clone(),
                measured: Some(meas),
            },
            Dataset {
                name: "b".into(),
                protocol: p,
                measured: None,
            },
        ];
        let bucket = load_model(ModelKind::Bucket, None).unwrap();
        let t = benchmark_table(&datasets, &[("bucket".into(), bucket)]);
        assert_eq!(t.rows[0].cells[1], None);
        assert_eq!(t.rows[0].average, t.rows[0].cells[0]);
        assert!(t.to_csv().contains("n/a"));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = Dataset {
            name: "x".into(),
            protocol: synthetic_protocols()[2].1.clone(),
            measured: Some(MeasuredSeries::new(Axis::FullCycles, vec![(0.0, 1.0), (30.0, 0.987654321)]).unwrap()),
        };
        d.write(dir.path()).unwrap();
        let back = Dataset::load_dir(dir.path()).unwrap();
        assert_eq!(back, vec![d]);
    }
}
