//! Single-particle model with lumped thermal dynamics and SEI growth.
//!
//! Each electrode is one spherical particle discretised with [`ChebDisc`] at five
//! interior nodes. Currents are positive when charging. Internally the kinetics use
//! the discharge current `I_dis = −I`, so that the voltage and heat equations read
//!
//! ```text
//! V = U_pos − U_neg + (T − T_ref)·dU/dT − (η_neg − η_pos) − (R_batt + r_sei·δ)·I_dis
//! ρ·v·c_p·dT/dt = I_dis²·R_batt + I_dis·(η_neg − η_pos) + I_dis·T·dU/dT − h·A·(T − T_env)
//! ```
//!
//! Interfacial current densities are positive for lithium insertion. At the negative
//! electrode the applied density `I/A_n` is split between intercalation and the SEI
//! side reaction; the particle boundary carries the full applied flux while the side
//! reaction removes lithium through the volumetric sink `i_sei·a_n/(n·F)`. With
//! `dL/dt = i_sei·A_n` this keeps particle lithium plus `L` exactly constant.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::chebyshev::ChebDisc;
use crate::error::{Error, Result};
use crate::table::{MonotoneCubic, Table1d};

pub const N_NODES: usize = 5;
pub const STATE_DIM: usize = 2 * N_NODES + 3;
/// Index of temperature, SEI thickness and lost lithium in the flat state vector.
pub const IDX_T: usize = 2 * N_NODES;
pub const IDX_DELTA: usize = 2 * N_NODES + 1;
pub const IDX_L: usize = 2 * N_NODES + 2;

/// Negative-electrode potential (V) the SEI reaction rate is referenced to.
pub const SEI_REFERENCE_V: f64 = 0.4;

/// Relative excursion of a concentration past `[0, c_max]` tolerated before flagging.
pub const CONCENTRATION_TOLERANCE: f64 = 1e-9;

const SPLIT_TOL: f64 = 1e-10;
const SPLIT_MAX_ITER: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpmState {
    /// Positive-electrode concentrations at the nodes, surface inwards (mol m⁻³).
    pub c_pos: [f64; N_NODES],
    pub c_neg: [f64; N_NODES],
    pub temperature_k: f64,
    /// SEI thickness (m).
    pub delta_m: f64,
    /// Lithium consumed by the side reaction (Ah).
    pub lost_li_ah: f64,
}

impl SpmState {
    pub fn to_array(&self) -> [f64; STATE_DIM] {
        let mut x = [0.0; STATE_DIM];
        x[..N_NODES].copy_from_slice(&self.c_pos);
        x[N_NODES..2 * N_NODES].copy_from_slice(&self.c_neg);
        x[IDX_T] = self.temperature_k;
        x[IDX_DELTA] = self.delta_m;
        x[IDX_L] = self.lost_li_ah;
        x
    }

    pub fn from_slice(x: &[f64]) -> Self {
        let mut c_pos = [0.0; N_NODES];
        let mut c_neg = [0.0; N_NODES];
        c_pos.copy_from_slice(&x[..N_NODES]);
        c_neg.copy_from_slice(&x[N_NODES..2 * N_NODES]);
        Self {
            c_pos,
            c_neg,
            temperature_k: x[IDX_T],
            delta_m: x[IDX_DELTA],
            lost_li_ah: x[IDX_L],
        }
    }
}

/// Per-electrode parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Electrode {
    pub radius_m: f64,
    pub c_max: f64,
    pub d_ref: f64,
    /// Signed activation energy of the diffusivity (J mol⁻¹), see [`arrhenius`].
    pub e_d: f64,
    pub k_ref: f64,
    pub e_k: f64,
    /// Particle surface per particle volume (m² m⁻³).
    pub specific_area: f64,
    /// Total particle surface of the electrode (m²).
    pub area_m2: f64,
    /// Stoichiometry at 0 % and 100 % state of charge.
    pub sto_0: f64,
    pub sto_100: f64,
    /// Electrode potential (V) against stoichiometry `c/c_max`.
    pub ocv: MonotoneCubic,
}

impl Electrode {
    /// Particle volume (m³).
    pub fn solid_volume(&self) -> f64 {
        self.area_m2 / self.specific_area
    }

    fn validate(&self, name: &str) -> Result<()> {
        let positive = [
            ("radius_m", self.radius_m),
            ("c_max", self.c_max),
            ("d_ref", self.d_ref),
            ("k_ref", self.k_ref),
            ("specific_area", self.specific_area),
            ("area_m2", self.area_m2),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name}.{field} must be positive, got {v}")));
            }
        }
        // the particle inventory only balances the applied current when a = 3/R
        let geometric = 3.0 / self.radius_m;
        if ((self.specific_area - geometric) / geometric).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "{name}.specific_area {} must equal 3/radius = {geometric}",
                self.specific_area
            )));
        }
        for (field, v) in [("sto_0", self.sto_0), ("sto_100", self.sto_100)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name}.{field} must lie in [0, 1]")));
            }
        }
        let t = self.ocv.table();
        if !t.is_monotone() {
            return Err(Error::Config(format!("{name} OCV table must be monotone")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeiParams {
    pub n_sei: f64,
    pub k_ref: f64,
    pub e_k: f64,
    pub d_ref: f64,
    pub e_d: f64,
    /// kg mol⁻¹
    pub molar_mass: f64,
    /// kg m⁻³
    pub density: f64,
    /// Ω m⁻¹
    pub r_sei: f64,
    /// Initial (and minimum) thickness (m).
    pub delta0_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThermalParams {
    /// kg m⁻³
    pub density: f64,
    /// m³
    pub volume: f64,
    /// J kg⁻¹ K⁻¹
    pub heat_capacity: f64,
    /// W m⁻² K⁻¹
    pub h: f64,
    pub area_m2: f64,
    pub t_env: f64,
    pub t_ref: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpmParams {
    pub pos: Electrode,
    pub neg: Electrode,
    pub alpha_ct: f64,
    pub n_electrons: f64,
    pub c_el: f64,
    /// V K⁻¹
    pub docv_dt: f64,
    pub r_batt: f64,
    pub sei: SeiParams,
    pub thermal: ThermalParams,
    pub faraday: f64,
    pub gas_constant: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub n_cells: f64,
    /// Currency per Ah of lost lithium.
    pub lambda_degr_ah: f64,
    /// Nameplate capacity used for C-rates (Ah).
    pub nominal_ah: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ElectrodeFile {
    radius_m: f64,
    c_max: f64,
    d_ref: f64,
    e_d: f64,
    k_ref: f64,
    e_k: f64,
    specific_area: Option<f64>,
    area_m2: f64,
    sto_0: f64,
    sto_100: f64,
    ocv_file: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpmFile {
    alpha_ct: f64,
    n_electrons: f64,
    c_el: f64,
    docv_dt: f64,
    r_batt: f64,
    faraday: f64,
    gas_constant: f64,
    v_min: f64,
    v_max: f64,
    n_cells: f64,
    lambda_degr_ah: f64,
    nominal_ah: f64,
    positive: ElectrodeFile,
    negative: ElectrodeFile,
    sei: SeiParams,
    thermal: ThermalParams,
}

impl ElectrodeFile {
    fn build(self, base: &Path) -> Result<Electrode> {
        let path = if self.ocv_file.is_absolute() {
            self.ocv_file.clone()
        } else {
            base.join(&self.ocv_file)
        };
        let table = Table1d::load_csv(&path, "sto", "ocv_v")?;
        Ok(Electrode {
            radius_m: self.radius_m,
            c_max: self.c_max,
            d_ref: self.d_ref,
            e_d: self.e_d,
            k_ref: self.k_ref,
            e_k: self.e_k,
            specific_area: self.specific_area.unwrap_or(3.0 / self.radius_m),
            area_m2: self.area_m2,
            sto_0: self.sto_0,
            sto_100: self.sto_100,
            ocv: MonotoneCubic::new(table),
        })
    }
}

impl SpmParams {
    /// Loads a TOML parameter file; OCV paths are relative to the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: SpmFile = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let p = SpmParams {
            pos: file.positive.build(base)?,
            neg: file.negative.build(base)?,
            alpha_ct: file.alpha_ct,
            n_electrons: file.n_electrons,
            c_el: file.c_el,
            docv_dt: file.docv_dt,
            r_batt: file.r_batt,
            sei: file.sei,
            thermal: file.thermal,
            faraday: file.faraday,
            gas_constant: file.gas_constant,
            v_min: file.v_min,
            v_max: file.v_max,
            n_cells: file.n_cells,
            lambda_degr_ah: file.lambda_degr_ah,
            nominal_ah: file.nominal_ah,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.pos.validate("positive")?;
        self.neg.validate("negative")?;
        if !(self.alpha_ct > 0.0 && self.alpha_ct < 1.0) {
            return Err(Error::Config(format!("alpha_ct {} must lie in (0, 1)", self.alpha_ct)));
        }
        let positive = [
            ("n_electrons", self.n_electrons),
            ("c_el", self.c_el),
            ("r_batt", self.r_batt),
            ("faraday", self.faraday),
            ("gas_constant", self.gas_constant),
            ("nominal_ah", self.nominal_ah),
            ("sei.n_sei", self.sei.n_sei),
            ("sei.k_ref", self.sei.k_ref),
            ("sei.d_ref", self.sei.d_ref),
            ("sei.molar_mass", self.sei.molar_mass),
            ("sei.density", self.sei.density),
            ("sei.delta0_m", self.sei.delta0_m),
            ("thermal.density", self.thermal.density),
            ("thermal.volume", self.thermal.volume),
            ("thermal.heat_capacity", self.thermal.heat_capacity),
            ("thermal.h", self.thermal.h),
            ("thermal.area_m2", self.thermal.area_m2),
            ("thermal.t_env", self.thermal.t_env),
            ("thermal.t_ref", self.thermal.t_ref),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{field} must be positive, got {v}")));
            }
        }
        if !(self.sei.r_sei >= 0.0) {
            return Err(Error::Config("sei.r_sei must be non-negative".into()));
        }
        if !(self.v_min < self.v_max) {
            return Err(Error::Config("v_min must be below v_max".into()));
        }
        if !(self.n_cells >= 1.0) {
            return Err(Error::Config("n_cells must be at least 1".into()));
        }
        Ok(())
    }

    /// Thermal mass ρ·v·c_p (J K⁻¹).
    pub fn heat_capacity_j_k(&self) -> f64 {
        self.thermal.density * self.thermal.volume * self.thermal.heat_capacity
    }

    /// Ah per mol m⁻³ of average concentration in an electrode.
    pub fn ah_per_concentration(&self, e: &Electrode) -> f64 {
        e.solid_volume() * self.n_electrons * self.faraday / 3600.0
    }
}

/// `ref·exp[(E/R)(1/T − 1/T_ref)]`, exactly as printed. With this sign a negative
/// activation energy makes the quantity grow with temperature.
pub fn arrhenius(ref_value: f64, e_act: f64, t: f64, t_ref: f64, gas_constant: f64) -> f64 {
    ref_value * ((e_act / gas_constant) * (1.0 / t - 1.0 / t_ref)).exp()
}

/// Exchange current density (A m⁻²).
pub fn exchange_current(
    c_surf: f64,
    c_max: f64,
    c_el: f64,
    k: f64,
    alpha_ct: f64,
    n: f64,
    faraday: f64,
) -> Result<f64> {
    if !(0.0..=c_max).contains(&c_surf) {
        return Err(Error::Domain(format!(
            "surface concentration {c_surf} outside [0, {c_max}]"
        )));
    }
    Ok(n * faraday
        * k
        * c_surf.powf(alpha_ct)
        * c_el.powf(1.0 - alpha_ct)
        * (c_max - c_surf).powf(1.0 - alpha_ct))
}

/// Butler–Volmer current density for overpotential `eta`.
pub fn bv_current(eta: f64, j0: f64, t: f64, alpha_ct: f64, n: f64, faraday: f64, gas_constant: f64) -> f64 {
    let f = n * faraday / (gas_constant * t);
    j0 * ((-alpha_ct * f * eta).exp() - ((1.0 - alpha_ct) * f * eta).exp())
}

/// Overpotential that carries current density `j` (positive = insertion, η < 0).
pub fn bv_overpotential(
    j: f64,
    j0: f64,
    t: f64,
    alpha_ct: f64,
    n: f64,
    faraday: f64,
    gas_constant: f64,
) -> Result<f64> {
    if !(j0 > 0.0) {
        return Err(Error::SingularKinetics(j0));
    }
    let f = n * faraday / (gas_constant * t);
    if alpha_ct == 0.5 {
        return Ok(-(2.0 / f) * (j / (2.0 * j0)).asinh());
    }
    // g is strictly decreasing in η; bracket, then safeguarded Newton
    let g = |eta: f64| bv_current(eta, j0, t, alpha_ct, n, faraday, gas_constant) - j;
    let mut eta = -(2.0 / f) * (j / (2.0 * j0)).asinh();
    let mut step = 1.0 / f;
    let (mut lo, mut hi) = (eta, eta);
    while g(lo) < 0.0 {
        lo -= step;
        step *= 2.0;
    }
    step = 1.0 / f;
    while g(hi) > 0.0 {
        hi += step;
        step *= 2.0;
    }
    let tol = 1e-12 * j0;
    for _ in 0..200 {
        let r = g(eta);
        if r.abs() <= tol {
            return Ok(eta);
        }
        if r > 0.0 {
            lo = eta;
        } else {
            hi = eta;
        }
        let dg = -j0 * f * (alpha_ct * (-alpha_ct * f * eta).exp() + (1.0 - alpha_ct) * ((1.0 - alpha_ct) * f * eta).exp());
        let newton = eta - r / dg;
        eta = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo <= f64::EPSILON * eta.abs().max(1e-300) {
            return Ok(eta);
        }
    }
    Ok(eta)
}

/// SEI side-reaction current density (A m⁻²).
pub fn sei_current(eta_neg: f64, ocv_neg: f64, delta: f64, t: f64, p: &SpmParams) -> f64 {
    let s = &p.sei;
    let (fa, rg) = (p.faraday, p.gas_constant);
    let t_ref = p.thermal.t_ref;
    let k = arrhenius(s.k_ref, s.e_k, t, t_ref, rg);
    let d = arrhenius(s.d_ref, s.e_d, t, t_ref, rg);
    let kinetic = 1.0 / (s.n_sei * fa * k * (-(s.n_sei * fa / (rg * t)) * (ocv_neg - SEI_REFERENCE_V)).exp());
    let transport = delta / (s.n_sei * fa * d);
    (-(p.n_electrons * fa / (rg * t)) * eta_neg).exp() / (kinetic + transport)
}

/// Everything computed from one state/current pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpmEval {
    pub deriv: [f64; STATE_DIM],
    pub voltage: f64,
    pub eta_pos: f64,
    pub eta_neg: f64,
    pub i_sei: f64,
    pub c_surf_pos: f64,
    pub c_surf_neg: f64,
    /// Largest relative excursion of a node or surface concentration past its bounds.
    pub violation: Option<f64>,
}

/// Model instance: parameters plus the two particle discretisations.
#[derive(Debug, Clone)]
pub struct Spm {
    params: SpmParams,
    disc_pos: ChebDisc,
    disc_neg: ChebDisc,
    side_reaction: bool,
}

impl Spm {
    pub fn new(params: SpmParams) -> Result<Self> {
        params.validate()?;
        let disc_pos = ChebDisc::new(N_NODES, params.pos.radius_m)?;
        let disc_neg = ChebDisc::new(N_NODES, params.neg.radius_m)?;
        Ok(Self {
            params,
            disc_pos,
            disc_neg,
            side_reaction: true,
        })
    }

    pub fn params(&self) -> &SpmParams {
        &self.params
    }

    pub fn discs(&self) -> (&ChebDisc, &ChebDisc) {
        (&self.disc_pos, &self.disc_neg)
    }

    pub fn side_reaction(&self) -> bool {
        self.side_reaction
    }

    pub fn with_side_reaction(mut self, on: bool) -> Self {
        self.side_reaction = on;
        self
    }

    pub fn set_side_reaction(&mut self, on: bool) {
        self.side_reaction = on;
    }

    /// Relaxed cell at state of charge `z`, ambient temperature, fresh SEI.
    pub fn state_at_soc(&self, z: f64) -> SpmState {
        let p = &self.params;
        let x = p.neg.sto_0 + z * (p.neg.sto_100 - p.neg.sto_0);
        let y = p.pos.sto_0 + z * (p.pos.sto_100 - p.pos.sto_0);
        SpmState {
            c_pos: [y * p.pos.c_max; N_NODES],
            c_neg: [x * p.neg.c_max; N_NODES],
            temperature_k: p.thermal.t_env,
            delta_m: p.sei.delta0_m,
            lost_li_ah: 0.0,
        }
    }

    /// State of charge read off the average negative-electrode stoichiometry.
    pub fn soc(&self, s: &SpmState) -> f64 {
        let p = &self.params;
        let x = self.disc_neg.average(&s.c_neg) / p.neg.c_max;
        (x - p.neg.sto_0) / (p.neg.sto_100 - p.neg.sto_0)
    }

    /// Lithium held in each particle (Ah): (positive, negative).
    pub fn particle_lithium_ah(&self, s: &SpmState) -> (f64, f64) {
        let p = &self.params;
        (
            self.disc_pos.average(&s.c_pos) * p.ah_per_concentration(&p.pos),
            self.disc_neg.average(&s.c_neg) * p.ah_per_concentration(&p.neg),
        )
    }

    /// Particle lithium plus lost lithium (Ah); constant along any trajectory.
    pub fn lithium_inventory_ah(&self, s: &SpmState) -> f64 {
        let (a, b) = self.particle_lithium_ah(s);
        a + b + s.lost_li_ah
    }

    /// Removes `ah` of cyclable lithium from the negative particle and books it as lost.
    pub fn remove_lithium(&self, s: &SpmState, ah: f64) -> SpmState {
        let p = &self.params;
        let dc = ah / p.ah_per_concentration(&p.neg);
        let mut out = *s;
        for c in out.c_neg.iter_mut() {
            *c -= dc;
        }
        out.lost_li_ah += ah;
        out
    }

    /// Largest relative bound excursion of node concentrations, if any.
    pub fn node_violation(&self, s: &SpmState) -> Option<f64> {
        let p = &self.params;
        let mut worst: f64 = 0.0;
        for (cs, cmax) in [(&s.c_pos, p.pos.c_max), (&s.c_neg, p.neg.c_max)] {
            for &c in cs {
                worst = worst.max(-c / cmax).max(c / cmax - 1.0);
            }
        }
        (worst > CONCENTRATION_TOLERANCE).then_some(worst)
    }

    /// Evaluates derivatives, voltage and kinetics at `s` under charge-positive
    /// current `current_a`. With `strict`, surface concentrations at or beyond the
    /// bounds are a domain error; otherwise they are clamped for the kinetics and
    /// flagged.
    pub fn evaluate(&self, s: &SpmState, current_a: f64, strict: bool) -> Result<SpmEval> {
        let p = &self.params;
        let (fa, rg) = (p.faraday, p.gas_constant);
        let n = p.n_electrons;
        let t = s.temperature_k;
        let t_ref = p.thermal.t_ref;
        if !(t > 0.0) {
            return Err(Error::Domain(format!("temperature {t} K must be positive")));
        }
        let d_pos = arrhenius(p.pos.d_ref, p.pos.e_d, t, t_ref, rg);
        let d_neg = arrhenius(p.neg.d_ref, p.neg.e_d, t, t_ref, rg);
        let k_pos = arrhenius(p.pos.k_ref, p.pos.e_k, t, t_ref, rg);
        let k_neg = arrhenius(p.neg.k_ref, p.neg.e_k, t, t_ref, rg);

        // applied interfacial densities, positive = insertion
        let j_neg_applied = current_a / p.neg.area_m2;
        let j_pos = -current_a / p.pos.area_m2;
        let flux_neg = j_neg_applied / (n * fa);
        let flux_pos = j_pos / (n * fa);

        let cs_pos = self.disc_pos.surface(&s.c_pos, d_pos, flux_pos);
        let cs_neg = self.disc_neg.surface(&s.c_neg, d_neg, flux_neg);

        let mut violation = self.node_violation(s).unwrap_or(0.0);
        let mut clamp = |c: f64, cmax: f64, which: &str| -> Result<f64> {
            let lo = 1e-9 * cmax;
            let hi = cmax - lo;
            if c > lo && c < hi {
                return Ok(c);
            }
            if strict {
                return Err(Error::Domain(format!(
                    "{which} surface concentration {c:.6e} at or beyond [0, {cmax}]"
                )));
            }
            violation = violation.max(-c / cmax).max(c / cmax - 1.0);
            Ok(c.clamp(lo, hi))
        };
        let cs_pos_k = clamp(cs_pos, p.pos.c_max, "positive")?;
        let cs_neg_k = clamp(cs_neg, p.neg.c_max, "negative")?;

        let j0_pos = exchange_current(cs_pos_k, p.pos.c_max, p.c_el, k_pos, p.alpha_ct, n, fa)?;
        let j0_neg = exchange_current(cs_neg_k, p.neg.c_max, p.c_el, k_neg, p.alpha_ct, n, fa)?;
        let u_pos = p.pos.ocv.eval(cs_pos_k / p.pos.c_max);
        let u_neg = p.neg.ocv.eval(cs_neg_k / p.neg.c_max);

        let eta_pos = bv_overpotential(j_pos, j0_pos, t, p.alpha_ct, n, fa, rg)?;
        let (eta_neg, i_sei) = if self.side_reaction {
            self.split_negative(j_neg_applied, j0_neg, u_neg, s.delta_m, t)?
        } else {
            (bv_overpotential(j_neg_applied, j0_neg, t, p.alpha_ct, n, fa, rg)?, 0.0)
        };

        let i_dis = -current_a;
        let voltage = u_pos - u_neg + (t - t_ref) * p.docv_dt
            - (eta_neg - eta_pos)
            - (p.r_batt + p.sei.r_sei * s.delta_m) * i_dis;

        let mut deriv = [0.0; STATE_DIM];
        self.disc_pos.rhs_into(&s.c_pos, d_pos, flux_pos, &mut deriv[..N_NODES]);
        self.disc_neg
            .rhs_into(&s.c_neg, d_neg, flux_neg, &mut deriv[N_NODES..2 * N_NODES]);
        let sink = i_sei * p.neg.specific_area / (n * fa);
        for d in &mut deriv[N_NODES..2 * N_NODES] {
            *d -= sink;
        }
        let heat = i_dis * i_dis * p.r_batt + i_dis * (eta_neg - eta_pos) + i_dis * t * p.docv_dt
            - p.thermal.h * p.thermal.area_m2 * (t - p.thermal.t_env);
        deriv[IDX_T] = heat / p.heat_capacity_j_k();
        deriv[IDX_DELTA] = i_sei * p.sei.molar_mass / (p.sei.n_sei * fa * p.sei.density);
        deriv[IDX_L] = i_sei * p.neg.area_m2 / 3600.0;

        Ok(SpmEval {
            deriv,
            voltage,
            eta_pos,
            eta_neg,
            i_sei,
            c_surf_pos: cs_pos,
            c_surf_neg: cs_neg,
            violation: (violation > CONCENTRATION_TOLERANCE).then_some(violation),
        })
    }

    /// Splits the applied density between intercalation and the side reaction by
    /// damped fixed-point iteration on η_neg.
    fn split_negative(&self, j_applied: f64, j0: f64, u_neg: f64, delta: f64, t: f64) -> Result<(f64, f64)> {
        let p = &self.params;
        let (fa, rg, n, a) = (p.faraday, p.gas_constant, p.n_electrons, p.alpha_ct);
        let mut eta = bv_overpotential(j_applied, j0, t, a, n, fa, rg)?;
        let mut damping = 1.0;
        let mut last_change = f64::INFINITY;
        let mut converged = false;
        for _ in 0..SPLIT_MAX_ITER {
            let i_sei = sei_current(eta, u_neg, delta, t, p);
            let target = bv_overpotential(j_applied - i_sei, j0, t, a, n, fa, rg)?;
            let change = target - eta;
            if change.abs() > last_change {
                damping *= 0.5;
            }
            last_change = change.abs();
            eta += damping * change;
            if converged {
                break;
            }
            let residual = bv_current(eta, j0, t, a, n, fa, rg) + sei_current(eta, u_neg, delta, t, p) - j_applied;
            // one more sweep after reaching tolerance pins η to rounding
            converged = residual.abs() <= SPLIT_TOL;
        }
        if !converged {
            return Err(Error::Domain(format!(
                "SEI current split did not converge in {SPLIT_MAX_ITER} iterations"
            )));
        }
        Ok((eta, sei_current(eta, u_neg, delta, t, p)))
    }

    /// State derivative; bound violations are flagged in the returned evaluation.
    pub fn rhs(&self, s: &SpmState, current_a: f64) -> Result<SpmEval> {
        self.evaluate(s, current_a, false)
    }

    /// Terminal voltage; errors when a surface concentration reaches its bounds.
    pub fn voltage(&self, s: &SpmState, current_a: f64) -> Result<f64> {
        Ok(self.evaluate(s, current_a, true)?.voltage)
    }

    /// One forward-Euler step of at most 5 s.
    pub fn step(&self, s: &SpmState, current_a: f64, dt_s: f64) -> Result<crate::bucket::StepOutcome<SpmState>> {
        if !(dt_s > 0.0 && dt_s <= 5.0) {
            return Err(Error::Config(format!("spm step {dt_s} s must lie in (0, 5]")));
        }
        let ev = self.rhs(s, current_a)?;
        let next = euler(s, &ev, dt_s);
        Ok(crate::bucket::StepOutcome {
            violation: self.node_violation(&next),
            state: next,
        })
    }

    /// C/25 capacity checkup on a copy of `s` with the side reaction off: charge to
    /// `v_max`, rest one hour, discharge to `v_min`. Returns the discharged Ah.
    pub fn measure_capacity(&self, s: &SpmState) -> Result<f64> {
        let probe = self.clone().with_side_reaction(false);
        let i = self.params.nominal_ah / 25.0;
        let dt = 5.0;
        let limit_steps = (60.0 * 3600.0 / dt) as usize;
        let mut state = *s;

        probe.run_to_voltage(&mut state, i, dt, limit_steps)?;
        for _ in 0..(3600.0 / dt) as usize {
            let ev = probe.evaluate(&state, 0.0, false)?;
            state = euler(&state, &ev, dt);
        }
        let seconds = probe.run_to_voltage(&mut state, -i, dt, limit_steps)?;
        Ok(i * seconds / 3600.0)
    }

    /// Applies constant current until the voltage limit in its direction is
    /// crossed; returns the elapsed time with the crossing interpolated linearly.
    fn run_to_voltage(&self, s: &mut SpmState, current_a: f64, dt: f64, limit_steps: usize) -> Result<f64> {
        let p = &self.params;
        let (limit, charging) = if current_a > 0.0 { (p.v_max, true) } else { (p.v_min, false) };
        let beyond = |v: f64| if charging { v >= limit } else { v <= limit };
        let mut ev = self.evaluate(s, current_a, false)?;
        if beyond(ev.voltage) {
            return Ok(0.0);
        }
        for k in 0..limit_steps {
            let next = euler(s, &ev, dt);
            let ev_next = self.evaluate(&next, current_a, false)?;
            if beyond(ev_next.voltage) || ev_next.violation.is_some() {
                let frac = if ev_next.violation.is_some() && !beyond(ev_next.voltage) {
                    1.0
                } else {
                    ((limit - ev.voltage) / (ev_next.voltage - ev.voltage)).clamp(0.0, 1.0)
                };
                *s = next;
                return Ok((k as f64 + frac) * dt);
            }
            *s = next;
            ev = ev_next;
        }
        Err(Error::Measurement(format!(
            "voltage {limit} V not reached after {} h at {current_a:.4} A (last {:.4} V)",
            limit_steps as f64 * dt / 3600.0,
            ev.voltage
        )))
    }
}

#[inline]
pub(crate) fn euler(s: &SpmState, ev: &SpmEval, dt: f64) -> SpmState {
    let mut x = s.to_array();
    for (xi, di) in x.iter_mut().zip(&ev.deriv) {
        *xi += dt * di;
    }
    SpmState::from_slice(&x)
}

/// Shipped default parameter file, relative to the crate root.
pub fn default_params_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join("spm.toml")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn model() -> Spm {
        Spm::new(SpmParams::load(default_params_path()).unwrap()).unwrap()
    }

    #[test]
    fn arrhenius_identities() {
        let r = 8.314;
        assert_eq!(arrhenius(3.0, 5e4, 310.0, 310.0, r), 3.0);
        assert_eq!(arrhenius(3.0, 0.0, 400.0, 310.0, r), 3.0);
        assert_relative_eq!(arrhenius(1.0, r, 600.0, 300.0, r), (-1.0f64 / 600.0).exp(), max_relative = 1e-15);
    }

    #[test]
    fn arrhenius_monotone_with_sign_of_exponent() {
        let r = 8.314;
        for e in [-4e4, 4e4] {
            let lo = arrhenius(1.0, e, 290.0, 298.15, r);
            let hi = arrhenius(1.0, e, 320.0, 298.15, r);
            // exponent (E/R)(1/T − 1/T_ref) falls with T when E > 0
            assert_eq!(hi > lo, e < 0.0);
        }
    }

    #[test]
    fn exchange_current_vanishes_at_bounds_and_peaks_mid() {
        let (cmax, cel, k, n, f) = (30_000.0, 1000.0, 5e-12, 1.0, 96485.0);
        assert_eq!(exchange_current(0.0, cmax, cel, k, 0.5, n, f).unwrap(), 0.0);
        assert_eq!(exchange_current(cmax, cmax, cel, k, 0.5, n, f).unwrap(), 0.0);
        assert!(exchange_current(-1.0, cmax, cel, k, 0.5, n, f).is_err());
        assert!(exchange_current(cmax + 1.0, cmax, cel, k, 0.5, n, f).is_err());
        let mid = exchange_current(cmax / 2.0, cmax, cel, k, 0.5, n, f).unwrap();
        for i in 0..=1000 {
            let c = cmax * i as f64 / 1000.0;
            assert!(exchange_current(c, cmax, cel, k, 0.5, n, f).unwrap() <= mid * (1.0 + 1e-15));
        }
    }

    #[test]
    fn overpotential_sign_and_residual() {
        let (t, n, f, r) = (298.15, 1.0, 96485.33212, 8.314462618);
        assert_eq!(bv_overpotential(0.0, 1.0, t, 0.5, n, f, r).unwrap(), 0.0);
        assert!(bv_overpotential(2.0, 1.0, t, 0.5, n, f, r).unwrap() < 0.0);
        assert!(bv_overpotential(-2.0, 1.0, t, 0.5, n, f, r).unwrap() > 0.0);
        assert!(matches!(bv_overpotential(1.0, 0.0, t, 0.5, n, f, r), Err(Error::SingularKinetics(_))));
        for j in [-30.0, -1.0, -1e-4, 1e-4, 0.7, 25.0] {
            let eta = bv_overpotential(j, 0.8, t, 0.5, n, f, r).unwrap();
            assert_relative_eq!(bv_current(eta, 0.8, t, 0.5, n, f, r), j, max_relative = 1e-12);
        }
        for a in [0.3, 0.7] {
            for j in [-5.0, 0.2, 4.0] {
                let eta = bv_overpotential(j, 0.8, t, a, n, f, r).unwrap();
                assert!((bv_current(eta, 0.8, t, a, n, f, r) - j).abs() <= 1e-12 * 0.8);
            }
        }
    }

    #[test]
    fn sei_current_limits() {
        let p = model().params.clone();
        let t = 298.15;
        let base = sei_current(0.0, 0.1, 5e-9, t, &p);
        assert!(base > 0.0);
        assert!(sei_current(0.0, 0.1, 1e6, t, &p) < 1e-12 * base);
        assert!(sei_current(-0.05, 0.1, 5e-9, t, &p) > base);
        // transport-dominated thickness: doubling D_sei roughly doubles the current
        let mut delta = 5e-9;
        loop {
            let s = &p.sei;
            let k = arrhenius(s.k_ref, s.e_k, t, p.thermal.t_ref, p.gas_constant);
            let d = arrhenius(s.d_ref, s.e_d, t, p.thermal.t_ref, p.gas_constant);
            let kin = 1.0 / (s.n_sei * p.faraday * k * (-(s.n_sei * p.faraday / (p.gas_constant * t)) * (0.1 - 0.4)).exp());
            if delta / (s.n_sei * p.faraday * d) >= 20.0 * kin {
                break;
            }
            delta *= 2.0;
        }
        let mut q = p.clone();
        q.sei.d_ref *= 2.0;
        let ratio = sei_current(0.0, 0.1, delta, t, &q) / sei_current(0.0, 0.1, delta, t, &p);
        assert!((ratio - 2.0).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn rest_equilibrium_without_side_reaction() {
        let m = model().with_side_reaction(false);
        let mut s = m.state_at_soc(0.5);
        s.temperature_k = m.params.thermal.t_env;
        let ev = m.rhs(&s, 0.0).unwrap();
        for (k, d) in ev.deriv.iter().enumerate() {
            let scale = if k < 2 * N_NODES { 1e-10 * 3e4 } else { 1e-300 };
            assert!(d.abs() <= scale, "component {k}: {d}");
        }
        let p = &m.params;
        let expected = p.pos.ocv.eval(s.c_pos[0] / p.pos.c_max) - p.neg.ocv.eval(s.c_neg[0] / p.neg.c_max);
        assert_relative_eq!(ev.voltage, expected, max_relative = 1e-12);
    }

    #[test]
    fn nonuniform_rest_conserves_particle_lithium() {
        let m = model().with_side_reaction(false);
        let mut s = m.state_at_soc(0.5);
        s.c_neg = [12_000.0, 14_000.0, 16_000.0, 17_000.0, 15_500.0];
        s.c_pos = [40_000.0, 38_000.0, 36_500.0, 35_000.0, 36_000.0];
        let ev = m.rhs(&s, 0.0).unwrap();
        let (dp, dn) = m.discs();
        assert!(dp.average(&ev.deriv[..N_NODES]).abs() < 1e-12 * 1e4);
        assert!(dn.average(&ev.deriv[N_NODES..2 * N_NODES]).abs() < 1e-12 * 1e4);
    }

    #[test]
    fn side_reaction_grows_film_and_loss() {
        let m = model();
        for z in [0.1, 0.5, 0.95] {
            for i in [-2.7, 0.0, 2.7] {
                let ev = m.rhs(&m.state_at_soc(z), i).unwrap();
                assert!(ev.i_sei > 0.0);
                assert!(ev.deriv[IDX_L] > 0.0 && ev.deriv[IDX_DELTA] > 0.0);
            }
        }
    }

    #[test]
    fn current_split_balances() {
        let m = model();
        let p = m.params();
        let s = m.state_at_soc(0.8);
        let i = 2.0;
        let ev = m.rhs(&s, i).unwrap();
        let (_, dn) = m.discs();
        let t = s.temperature_k;
        let d = arrhenius(p.neg.d_ref, p.neg.e_d, t, p.thermal.t_ref, p.gas_constant);
        let k = arrhenius(p.neg.k_ref, p.neg.e_k, t, p.thermal.t_ref, p.gas_constant);
        let flux = i / p.neg.area_m2 / (p.n_electrons * p.faraday);
        let cs = dn.surface(&s.c_neg, d, flux);
        let j0 = exchange_current(cs, p.neg.c_max, p.c_el, k, p.alpha_ct, p.n_electrons, p.faraday).unwrap();
        let j_int = bv_current(ev.eta_neg, j0, t, p.alpha_ct, p.n_electrons, p.faraday, p.gas_constant);
        assert!((j_int + ev.i_sei - i / p.neg.area_m2).abs() <= SPLIT_TOL);
    }

    #[test]
    fn step_rejects_long_steps() {
        let m = model();
        let s = m.state_at_soc(0.5);
        assert!(matches!(m.step(&s, 0.0, 6.0), Err(Error::Config(_))));
        assert!(m.step(&s, 0.0, 5.0).is_ok());
    }

    #[test]
    fn rest_step_conserves_each_particle() {
        let m = model().with_side_reaction(false);
        let mut s = m.state_at_soc(0.3);
        s.c_neg[2] *= 1.1;
        let (p0, n0) = m.particle_lithium_ah(&s);
        for _ in 0..100 {
            let (pa, na) = m.particle_lithium_ah(&s);
            s = m.step(&s, 0.0, 5.0).unwrap().state;
            let (pb, nb) = m.particle_lithium_ah(&s);
            assert!(((pb - pa) / pa).abs() <= 1e-9);
            assert!(((nb - na) / na).abs() <= 1e-9);
        }
        let (p1, n1) = m.particle_lithium_ah(&s);
        assert_relative_eq!(p0, p1, max_relative = 1e-9);
        assert_relative_eq!(n0, n1, max_relative = 1e-9);
    }

    #[test]
    fn rest_with_side_reaction_lowers_soc() {
        let m = model();
        let mut s = m.state_at_soc(0.9);
        let z0 = m.soc(&s);
        for _ in 0..720 {
            s = m.step(&s, 0.0, 5.0).unwrap().state;
        }
        assert!(m.soc(&s) < z0);
        assert!(s.lost_li_ah > 0.0);
    }

    #[test]
    fn thermal_relaxation_sign() {
        let m = model().with_side_reaction(false);
        let p = m.params();
        for dt_env in [-10.0, 7.0] {
            let mut s = m.state_at_soc(0.5);
            s.temperature_k = p.thermal.t_env + dt_env;
            let ev = m.rhs(&s, 0.0).unwrap();
            // the entropic and overpotential terms vanish at rest
            assert_eq!(ev.deriv[IDX_T].signum(), -dt_env.signum());
            let expected = -p.thermal.h * p.thermal.area_m2 * dt_env / p.heat_capacity_j_k();
            assert_relative_eq!(ev.deriv[IDX_T], expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn voltage_structure() {
        let m = model();
        let s = m.state_at_soc(0.5);
        let p = m.params();
        let i = 1.5;
        let v_c = m.voltage(&s, i).unwrap();
        let v_d = m.voltage(&s, -i).unwrap();
        assert!(v_c > v_d);
        let ec = m.evaluate(&s, i, true).unwrap();
        let ed = m.evaluate(&s, -i, true).unwrap();
        let ohmic = 2.0 * (p.r_batt + p.sei.r_sei * s.delta_m) * i;
        let ocv_c = p.pos.ocv.eval(ec.c_surf_pos / p.pos.c_max) - p.neg.ocv.eval(ec.c_surf_neg / p.neg.c_max);
        let ocv_d = p.pos.ocv.eval(ed.c_surf_pos / p.pos.c_max) - p.neg.ocv.eval(ed.c_surf_neg / p.neg.c_max);
        let kin = -(ec.eta_neg - ec.eta_pos) + (ed.eta_neg - ed.eta_pos);
        assert_relative_eq!(v_c - v_d, ohmic + kin + ocv_c - ocv_d, max_relative = 1e-12);
        let mut thick = s;
        thick.delta_m *= 3.0;
        assert!(m.voltage(&thick, i).unwrap() > v_c);
        assert!(m.voltage(&thick, -i).unwrap() < v_d);
    }

    #[test]
    fn voltage_domain_error_at_bounds() {
        let m = model();
        let mut s = m.state_at_soc(0.5);
        s.c_neg = [m.params().neg.c_max; N_NODES];
        assert!(matches!(m.voltage(&s, 0.0), Err(Error::Domain(_))));
        s.c_neg = [1.001 * m.params().neg.c_max; N_NODES];
        let ev = m.rhs(&s, 0.0).unwrap();
        assert!(ev.violation.is_some());
    }

    #[test]
    fn state_round_trip() {
        let m = model();
        let s = m.state_at_soc(0.42);
        assert_eq!(SpmState::from_slice(&s.to_array()), s);
        assert_relative_eq!(m.soc(&s), 0.42, max_relative = 1e-12);
    }
}
