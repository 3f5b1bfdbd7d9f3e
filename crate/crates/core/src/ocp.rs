//! Multiple-shooting transcription of the arbitrage control problem.
//!
//! Decision vector `w = [x_0, …, x_K, u_0, …, u_{K−1}]`: one state per control
//! interval boundary and one piecewise-constant control per interval. Each
//! shooting block integrates its interval with forward-Euler steps and returns the
//! end state, running accumulators (revenue and the statistics the degradation
//! cost needs) and voltage samples at the start, three interior points and the end.
//!
//! Block derivatives come from a [`BlockDerivatives`] implementation; the default
//! uses central differences on each block, so one full Jacobian costs
//! `2·(nx + 1)` block integrations per interval.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::PriceSeries;
use crate::model::{BatteryModel, ModelKind};
use crate::profile::ControlProfile;
use crate::spm::IDX_L;

/// Voltage samples per interval: start, three interior points, end.
pub const VOLTAGE_SAMPLES: usize = 5;

/// Smoothing widths for |·| and √· in the differentiable degradation costs.
const EPS_SOC: f64 = 1e-4;
const EPS_CURRENT_A: f64 = 1e-3;
const EPS_THROUGHPUT_AH: f64 = 1e-4;
const EPS_POWER_REL: f64 = 1e-6;
const SOFTMAX_TEMPERATURE_REL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[serde(alias = "revenue")]
    RevenueOnly,
    Profit,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::RevenueOnly => "revenue",
            Objective::Profit => "profit",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "revenue" | "revenue_only" => Ok(Objective::RevenueOnly),
            "profit" => Ok(Objective::Profit),
            other => Err(Error::Config(format!("unknown objective `{other}` (revenue, profit)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OcpSpec {
    pub model: BatteryModel,
    pub horizon_s: f64,
    pub control_interval_s: f64,
    pub integration_step_s: f64,
    pub objective: Objective,
    pub initial_state: Vec<f64>,
    /// Prices from the start of the horizon.
    pub prices: PriceSeries,
    pub control_bounds: (f64, f64),
    /// Margin kept from each voltage limit during optimisation (V).
    pub voltage_backoff_v: f64,
    /// Battery age at the start of the horizon (s), for the calendar term.
    pub age_s: f64,
    /// Charge throughput before the horizon (Ah), for the cycle term.
    pub prior_throughput_ah: f64,
    /// Initial guess for the controls; zeros when absent.
    pub initial_controls: Option<Vec<f64>>,
}

impl OcpSpec {
    /// Spec over the whole price series with 15-minute controls, 5-second steps,
    /// ±1C bounds and a 5 mV voltage margin.
    pub fn new(model: BatteryModel, prices: PriceSeries, objective: Objective, initial_state: Vec<f64>) -> Self {
        let c = model.one_c();
        Self {
            horizon_s: prices.horizon_s(),
            control_interval_s: 900.0,
            integration_step_s: 5.0,
            objective,
            initial_state,
            prices,
            control_bounds: (-c, c),
            voltage_backoff_v: 0.005,
            age_s: 0.0,
            prior_throughput_ah: 0.0,
            initial_controls: None,
            model,
        }
    }
}

fn divides(whole: f64, part: f64) -> Option<usize> {
    let n = (whole / part).round();
    ((n * part - whole).abs() <= 1e-9 * whole.max(1.0) && n >= 1.0).then_some(n as usize)
}

/// Sparse matrix as (row, column, value) triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for &(r, c, v) in &self.entries {
            d[r][c] += v;
        }
        d
    }
}

/// Source of shooting-block Jacobians. The output vector of block `k` is
/// `[x_end; accumulators; voltage samples]`; the Jacobian is stored column-major
/// with one column per input `[x_k; u_k]`.
pub trait BlockDerivatives: Send + Sync {
    fn block_jacobian(&self, nlp: &NlpInstance, k: usize, x: &[f64], u: f64, jac: &mut [f64]) -> Result<()>;
}

/// Central differences with steps relative to each input's characteristic size.
#[derive(Debug, Clone, Copy)]
pub struct CentralDifferences {
    pub rel_step: f64,
}

impl Default for CentralDifferences {
    fn default() -> Self {
        Self { rel_step: 2e-6 }
    }
}

impl BlockDerivatives for CentralDifferences {
    fn block_jacobian(&self, nlp: &NlpInstance, k: usize, x: &[f64], u: f64, jac: &mut [f64]) -> Result<()> {
        let nx = nlp.nx;
        let no = nlp.block_outputs();
        let mut xin = x.to_vec();
        let mut plus = vec![0.0; no];
        let mut minus = vec![0.0; no];
        for j in 0..=nx {
            let (base, scale) = if j < nx {
                (x[j], nlp.state_scale[j])
            } else {
                (u, nlp.control_scale)
            };
            let h = self.rel_step * base.abs().max(scale);
            if j < nx {
                xin[j] = base + h;
                nlp.simulate_block(k, &xin, u, &mut plus)?;
                xin[j] = base - h;
                nlp.simulate_block(k, &xin, u, &mut minus)?;
                xin[j] = base;
            } else {
                nlp.simulate_block(k, &xin, u + h, &mut plus)?;
                nlp.simulate_block(k, &xin, u - h, &mut minus)?;
            }
            let col = &mut jac[j * no..(j + 1) * no];
            for r in 0..no {
                col[r] = (plus[r] - minus[r]) / (2.0 * h);
            }
        }
        Ok(())
    }
}

/// Objective value with its partial derivatives.
#[derive(Debug, Clone)]
pub struct ObjectiveTerms {
    /// Currency; maximised.
    pub value: f64,
    pub revenue: f64,
    pub cost: f64,
    pub d_acc: Vec<f64>,
    pub d_nodes: Vec<f64>,
    pub d_controls: Vec<f64>,
}

/// Values of the full-space problem at one point.
#[derive(Debug, Clone)]
pub struct NlpValues {
    pub objective: f64,
    pub defects: Vec<f64>,
    /// `g ≤ 0` form.
    pub inequalities: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct NlpDerivatives {
    pub objective_grad: Vec<f64>,
    pub defect_jac: SparseMatrix,
    pub ineq_jac: SparseMatrix,
}

/// Result of integrating a control sequence from the fixed initial state.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub nodes: Vec<f64>,
    /// Per-interval block outputs, `block_outputs()` values each.
    pub outputs: Vec<f64>,
}

pub struct NlpInstance {
    pub spec: OcpSpec,
    pub n_intervals: usize,
    pub nx: usize,
    pub steps_per_interval: usize,
    pub dt: f64,
    pub n_acc: usize,
    pub n_volt: usize,
    pub n_state_bounds: usize,
    step_prices: Vec<f64>,
    state_scale: Vec<f64>,
    control_scale: f64,
    derivs: Box<dyn BlockDerivatives>,
}

impl std::fmt::Debug for NlpInstance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NlpInstance")
            .field("model", &self.spec.model.kind())
            .field("n_intervals", &self.n_intervals)
            .field("nx", &self.nx)
            .field("n_variables", &self.n_variables())
            .finish()
    }
}

/// Builds the multiple-shooting instance; checks the interval arithmetic.
pub fn assemble_nlp(spec: OcpSpec) -> Result<NlpInstance> {
    if !(spec.horizon_s > 0.0) {
        return Err(Error::Config("horizon must be positive".into()));
    }
    if !(spec.control_interval_s > 0.0 && spec.integration_step_s > 0.0 && spec.integration_step_s <= 5.0) {
        return Err(Error::Config(format!(
            "control interval {} s and integration step {} s (at most 5 s) must be positive",
            spec.control_interval_s, spec.integration_step_s
        )));
    }
    let n_intervals = divides(spec.horizon_s, spec.control_interval_s).ok_or_else(|| {
        Error::Config(format!(
            "horizon {} s is not a multiple of the control interval {} s",
            spec.horizon_s, spec.control_interval_s
        ))
    })?;
    let steps = divides(spec.control_interval_s, spec.integration_step_s).ok_or_else(|| {
        Error::Config(format!(
            "control interval {} s is not a multiple of the integration step {} s",
            spec.control_interval_s, spec.integration_step_s
        ))
    })?;
    if spec.prices.horizon_s() + 1e-9 < spec.horizon_s {
        return Err(Error::Range(format!(
            "prices cover {} s, horizon needs {} s",
            spec.prices.horizon_s(),
            spec.horizon_s
        )));
    }
    let nx = spec.model.state_dim();
    if spec.initial_state.len() != nx {
        return Err(Error::Config(format!(
            "initial state has {} entries, model needs {nx}",
            spec.initial_state.len()
        )));
    }
    let (lo, hi) = spec.control_bounds;
    if !(lo <= 0.0 && hi >= 0.0 && lo < hi) {
        return Err(Error::Config(format!("control bounds [{lo}, {hi}] must straddle zero")));
    }
    if let Some(g) = &spec.initial_controls {
        if g.len() != n_intervals {
            return Err(Error::Config(format!(
                "initial guess has {} controls, horizon has {n_intervals} intervals",
                g.len()
            )));
        }
    }
    let dt = spec.control_interval_s / steps as f64;
    let mut step_prices = Vec::with_capacity(n_intervals * steps);
    for i in 0..n_intervals * steps {
        step_prices.push(spec.prices.price_at(i as f64 * dt)?);
    }
    let n_acc = match spec.model.kind() {
        ModelKind::Bucket => 2,
        ModelKind::Ecm => 4,
        ModelKind::Spm => 1,
    };
    let n_volt = if spec.model.voltage_limits().is_some() { VOLTAGE_SAMPLES } else { 0 };
    let state_scale = spec.model.state_scale();
    let control_scale = lo.abs().max(hi.abs()).min(1e12).max(f64::MIN_POSITIVE);
    Ok(NlpInstance {
        n_intervals,
        nx,
        steps_per_interval: steps,
        dt,
        n_acc,
        n_volt,
        n_state_bounds: spec.model.n_state_bounds(),
        step_prices,
        state_scale,
        control_scale,
        derivs: Box::new(CentralDifferences::default()),
        spec,
    })
}

impl NlpInstance {
    pub fn with_block_derivatives(mut self, d: Box<dyn BlockDerivatives>) -> Self {
        self.derivs = d;
        self
    }

    pub fn model(&self) -> &BatteryModel {
        &self.spec.model
    }

    pub fn n_variables(&self) -> usize {
        (self.n_intervals + 1) * self.nx + self.n_intervals
    }

    pub fn n_defects(&self) -> usize {
        self.n_intervals * self.nx
    }

    pub fn ineq_per_interval(&self) -> usize {
        self.n_state_bounds + 2 * self.n_volt
    }

    pub fn n_inequalities(&self) -> usize {
        self.n_intervals * self.ineq_per_interval()
    }

    pub fn block_outputs(&self) -> usize {
        self.nx + self.n_acc + self.n_volt
    }

    pub fn control_scale(&self) -> f64 {
        self.control_scale
    }

    /// Offset of the first control in the decision vector.
    pub fn control_offset(&self) -> usize {
        (self.n_intervals + 1) * self.nx
    }

    /// Box bounds on the decision vector: `x_0` fixed, other states free.
    pub fn variable_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n_variables();
        let mut lo = vec![f64::NEG_INFINITY; n];
        let mut hi = vec![f64::INFINITY; n];
        lo[..self.nx].copy_from_slice(&self.spec.initial_state);
        hi[..self.nx].copy_from_slice(&self.spec.initial_state);
        let off = self.control_offset();
        for k in 0..self.n_intervals {
            lo[off + k] = self.spec.control_bounds.0;
            hi[off + k] = self.spec.control_bounds.1;
        }
        (lo, hi)
    }

    pub fn initial_controls(&self) -> Vec<f64> {
        let (lo, hi) = self.spec.control_bounds;
        match &self.spec.initial_controls {
            Some(g) => g.iter().map(|u| u.clamp(lo, hi)).collect(),
            None => vec![0.0; self.n_intervals],
        }
    }

    /// Decision vector with nodes from a rollout of the initial controls.
    pub fn initial_point(&self) -> Result<Vec<f64>> {
        let u = self.initial_controls();
        let r = self.rollout(&u)?;
        let mut w = r.nodes;
        w.extend_from_slice(&u);
        Ok(w)
    }

    /// Integrates interval `k` from `x` under control `u`; writes
    /// `[x_end; accumulators; voltages]` into `out`.
    pub fn simulate_block(&self, k: usize, x: &[f64], u: f64, out: &mut [f64]) -> Result<()> {
        let nx = self.nx;
        let m = self.steps_per_interval;
        let dt = self.dt;
        let model = &self.spec.model;
        let n_cells = model.n_cells();
        let prices = &self.step_prices[k * m..(k + 1) * m];
        let (state, rest) = out.split_at_mut(nx);
        let (acc, volts) = rest.split_at_mut(self.n_acc);
        state.copy_from_slice(x);
        acc.iter_mut().for_each(|a| *a = 0.0);
        let q = m / 4;
        let mut sample = 0;
        match model {
            BatteryModel::Bucket(_) => {
                let eps = EPS_POWER_REL * self.control_scale;
                for &price in prices {
                    model.step(state, u, dt)?;
                    acc[0] -= n_cells * u * price * dt / 3600.0;
                }
                acc[1] = ((u * u + eps * eps).sqrt() - eps) * dt * m as f64 / 3600.0;
            }
            _ => {
                for (j, &price) in prices.iter().enumerate() {
                    let v = model.step(state, u, dt)?.unwrap_or(0.0);
                    if self.n_volt > 0 && j % q == 0 && sample < VOLTAGE_SAMPLES - 1 && j / q == sample {
                        volts[sample] = v;
                        sample += 1;
                    }
                    acc[0] -= n_cells * u * v * price * dt / 3600.0;
                    if self.n_acc == 4 {
                        acc[1] += v * dt;
                        acc[2] += v * v * dt;
                        acc[3] += ((u * u + EPS_CURRENT_A * EPS_CURRENT_A).sqrt() - EPS_CURRENT_A) * dt / 3600.0;
                    }
                }
                if self.n_volt > 0 {
                    volts[VOLTAGE_SAMPLES - 1] = model.voltage(state, u)?.unwrap_or(0.0);
                }
            }
        }
        Ok(())
    }

    /// Integrates all intervals from the fixed initial state.
    pub fn rollout(&self, controls: &[f64]) -> Result<Rollout> {
        let nx = self.nx;
        let no = self.block_outputs();
        let k_n = self.n_intervals;
        let mut nodes = vec![0.0; (k_n + 1) * nx];
        nodes[..nx].copy_from_slice(&self.spec.initial_state);
        let mut outputs = vec![0.0; k_n * no];
        for k in 0..k_n {
            let (done, next) = nodes.split_at_mut((k + 1) * nx);
            let out = &mut outputs[k * no..(k + 1) * no];
            self.simulate_block(k, &done[k * nx..], controls[k], out)
                .map_err(|e| Error::Evaluation {
                    index: self.control_offset() + k,
                    msg: e.to_string(),
                })?;
            next[..nx].copy_from_slice(&out[..nx]);
        }
        Ok(Rollout { nodes, outputs })
    }

    /// Jacobians of every block at the given nodes and controls, concatenated.
    pub fn block_jacobians(&self, nodes: &[f64], controls: &[f64]) -> Result<Vec<f64>> {
        let nx = self.nx;
        let size = self.block_outputs() * (nx + 1);
        let mut jac = vec![0.0; self.n_intervals * size];
        for k in 0..self.n_intervals {
            self.derivs
                .block_jacobian(self, k, &nodes[k * nx..(k + 1) * nx], controls[k], &mut jac[k * size..(k + 1) * size])
                .map_err(|e| Error::Evaluation {
                    index: k * nx,
                    msg: e.to_string(),
                })?;
        }
        Ok(jac)
    }

    /// Objective (currency, maximised) from summed accumulators, nodes and controls.
    pub fn objective_terms(&self, acc_sum: &[f64], nodes: &[f64], controls: &[f64]) -> ObjectiveTerms {
        let nx = self.nx;
        let k_n = self.n_intervals;
        let mut t = ObjectiveTerms {
            value: acc_sum[0],
            revenue: acc_sum[0],
            cost: 0.0,
            d_acc: vec![0.0; self.n_acc],
            d_nodes: vec![0.0; nodes.len()],
            d_controls: vec![0.0; controls.len()],
        };
        t.d_acc[0] = 1.0;
        if self.spec.objective == Objective::RevenueOnly {
            return t;
        }
        let model = &self.spec.model;
        let w = model.n_cells() * model.lambda_degr();
        match model {
            BatteryModel::Bucket(p) => {
                let eps = EPS_POWER_REL * self.control_scale;
                let tau = SOFTMAX_TEMPERATURE_REL * self.control_scale;
                let mags: Vec<f64> = controls.iter().map(|u| (u * u + eps * eps).sqrt() - eps).collect();
                let top = mags.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = mags.iter().map(|a| ((a - top) / tau).exp()).collect();
                let total: f64 = weights.iter().sum();
                let peak = top + tau * total.ln();
                t.cost = w * (p.k_power * peak + p.k_throughput * acc_sum[1]);
                t.d_acc[1] = -w * p.k_throughput;
                for (k, u) in controls.iter().enumerate() {
                    let dmag = u / (u * u + eps * eps).sqrt();
                    t.d_controls[k] = -w * p.k_power * weights[k] / total * dmag;
                }
            }
            BatteryModel::Ecm(m) => {
                let e = self.ecm_cost(acc_sum, nodes, controls, m);
                t.cost = w * e.value;
                for a in 1..4 {
                    t.d_acc[a] = -w * e.d_acc[a];
                }
                for k in 0..=k_n {
                    t.d_nodes[k * nx] = -w * e.d_z[k];
                }
                for k in 0..k_n {
                    t.d_controls[k] = -w * e.d_u[k];
                }
            }
            BatteryModel::Spm(_) => {
                t.cost = w * (nodes[k_n * nx + IDX_L] - nodes[IDX_L]);
                t.d_nodes[k_n * nx + IDX_L] = -w;
                t.d_nodes[IDX_L] = w;
            }
        }
        t.value = t.revenue - t.cost;
        t
    }

    /// Smoothed degradation increment of the empirical law over the horizon (Ah)
    /// and its partials.
    fn ecm_cost(&self, acc: &[f64], nodes: &[f64], controls: &[f64], m: &crate::model::EcmModel) -> EcmCost {
        let nx = self.nx;
        let k_n = self.n_intervals;
        let steps = self.steps_per_interval;
        let dt = self.dt;
        let p = &m.params;
        let q = &m.degradation;
        let span = k_n as f64 * steps as f64 * dt;
        let c = dt / (3600.0 * p.e_ah);
        let tri = (steps * (steps - 1)) as f64 / 2.0;

        // mean SoC of the Euler samples; z is linear within each interval
        let mut z_int = 0.0;
        for k in 0..k_n {
            z_int += dt * (steps as f64 * nodes[k * nx] + c * controls[k] * tri);
        }
        let z_mean = z_int / span;
        let sabs = |x: f64| (x * x + EPS_SOC * EPS_SOC).sqrt() - EPS_SOC;
        let dsabs = |x: f64| x / (x * x + EPS_SOC * EPS_SOC).sqrt();
        let mut dev = 0.0;
        let mut d_dev_z = vec![0.0; k_n + 1];
        let mut d_dev_u = vec![0.0; k_n];
        let mut d_dev_mean = 0.0;
        for k in 0..k_n {
            let z0 = nodes[k * nx];
            let u = controls[k];
            for j in 0..steps {
                let e = z0 + j as f64 * c * u - z_mean;
                dev += sabs(e) * dt;
                let s = dsabs(e) * dt;
                d_dev_z[k] += s;
                d_dev_u[k] += s * j as f64 * c;
                d_dev_mean -= s;
            }
        }
        for k in 0..k_n {
            d_dev_z[k] += d_dev_mean * dt * steps as f64 / span;
            d_dev_u[k] += d_dev_mean * dt * c * tri / span;
        }
        let soc_dev = 2.0 * dev / span;

        let v_mean = acc[1] / span;
        let v_rms = (acc[2] / span).sqrt();
        let thr = acc[3];
        let temp = p.temperature_k;
        let t0 = self.spec.age_s / q.time_unit_s;
        let t1 = (self.spec.age_s + span) / q.time_unit_s;
        let cal_time = t1.powf(0.75) - t0.powf(0.75);
        let prior = self.spec.prior_throughput_ah;
        let sq1 = (prior + thr + EPS_THROUGHPUT_AH).sqrt();
        let sq0 = (prior + EPS_THROUGHPUT_AH).sqrt();
        let cyc_q = sq1 - sq0;

        let alpha = q.alpha(v_mean, temp);
        let beta = q.beta(v_rms, soc_dev);
        let scale = p.e_ah / q.scale_divisor;
        let value = (alpha * cal_time + beta * cyc_q) * scale;

        let a = &q.alpha;
        let d_alpha_dv = if alpha > 0.0 {
            a.v_slope * a.scale * (-a.activation_k / temp).exp()
        } else {
            0.0
        };
        let b = &q.beta;
        let (d_beta_dvr, d_beta_dsd) = if beta > 0.0 {
            (2.0 * b.quad * (v_rms - b.v_ref), b.dod)
        } else {
            (0.0, 0.0)
        };
        let mut d_acc = [0.0; 4];
        d_acc[1] = d_alpha_dv * cal_time * scale / span;
        d_acc[2] = if v_rms > 0.0 {
            d_beta_dvr * cyc_q * scale / (2.0 * v_rms * span)
        } else {
            0.0
        };
        d_acc[3] = beta * scale / (2.0 * sq1);
        let d_sd = d_beta_dsd * cyc_q * scale * 2.0 / span;
        EcmCost {
            value,
            d_acc,
            d_z: d_dev_z.iter().map(|v| v * d_sd).collect(),
            d_u: d_dev_u.iter().map(|v| v * d_sd).collect(),
        }
    }

    /// Inequality residuals for interval `k`: state bounds at `x_{k+1}`, then
    /// upper/lower voltage margins per sample.
    pub fn interval_inequalities(&self, next_node: &[f64], block_out: &[f64], out: &mut [f64]) {
        let nb = self.n_state_bounds;
        self.spec.model.state_bound_residuals(next_node, &mut out[..nb]);
        if let Some((v_min, v_max)) = self.spec.model.voltage_limits() {
            let b = self.spec.voltage_backoff_v;
            let volts = &block_out[self.nx + self.n_acc..];
            for (s, v) in volts.iter().enumerate() {
                out[nb + 2 * s] = v - (v_max - b);
                out[nb + 2 * s + 1] = (v_min + b) - v;
            }
        }
    }

    fn split<'a>(&self, w: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        w.split_at(self.control_offset())
    }

    /// Objective, shooting defects and inequalities at `w`.
    pub fn evaluate(&self, w: &[f64]) -> Result<NlpValues> {
        if w.len() != self.n_variables() {
            return Err(Error::Config(format!(
                "point has {} entries, instance has {} variables",
                w.len(),
                self.n_variables()
            )));
        }
        let (nodes, controls) = self.split(w);
        let nx = self.nx;
        let no = self.block_outputs();
        let ni = self.ineq_per_interval();
        let mut defects = vec![0.0; self.n_defects()];
        let mut ineq = vec![0.0; self.n_inequalities()];
        let mut acc = vec![0.0; self.n_acc];
        let mut out = vec![0.0; no];
        for k in 0..self.n_intervals {
            self.simulate_block(k, &nodes[k * nx..(k + 1) * nx], controls[k], &mut out)
                .map_err(|e| Error::Evaluation {
                    index: k * nx,
                    msg: e.to_string(),
                })?;
            let next = &nodes[(k + 1) * nx..(k + 2) * nx];
            for r in 0..nx {
                defects[k * nx + r] = out[r] - next[r];
            }
            for (a, v) in acc.iter_mut().zip(&out[nx..nx + self.n_acc]) {
                *a += v;
            }
            self.interval_inequalities(next, &out, &mut ineq[k * ni..(k + 1) * ni]);
        }
        let obj = self.objective_terms(&acc, nodes, controls);
        Ok(NlpValues {
            objective: obj.value,
            defects,
            inequalities: ineq,
        })
    }

    /// First derivatives of objective, defects and inequalities at `w`.
    pub fn derivatives(&self, w: &[f64]) -> Result<NlpDerivatives> {
        let (nodes, controls) = self.split(w);
        let nx = self.nx;
        let no = self.block_outputs();
        let ni = self.ineq_per_interval();
        let nb = self.n_state_bounds;
        let off = self.control_offset();
        let jac = self.block_jacobians(nodes, controls)?;
        let size = no * (nx + 1);

        let mut acc = vec![0.0; self.n_acc];
        let mut out = vec![0.0; no];
        for k in 0..self.n_intervals {
            self.simulate_block(k, &nodes[k * nx..(k + 1) * nx], controls[k], &mut out)?;
            for (a, v) in acc.iter_mut().zip(&out[nx..nx + self.n_acc]) {
                *a += v;
            }
        }
        let obj = self.objective_terms(&acc, nodes, controls);
        let mut grad = vec![0.0; self.n_variables()];
        grad[..off].copy_from_slice(&obj.d_nodes);
        grad[off..].copy_from_slice(&obj.d_controls);

        let mut defect = Vec::new();
        let mut ineq = Vec::new();
        let bound_jac = self.state_bound_jacobian();
        for k in 0..self.n_intervals {
            let jk = &jac[k * size..(k + 1) * size];
            for j in 0..=nx {
                let col = &jk[j * no..(j + 1) * no];
                let var = if j < nx { k * nx + j } else { off + k };
                grad[var] += (0..self.n_acc).map(|a| obj.d_acc[a] * col[nx + a]).sum::<f64>();
                for r in 0..nx {
                    if col[r] != 0.0 {
                        defect.push((k * nx + r, var, col[r]));
                    }
                }
                for s in 0..self.n_volt {
                    let dv = col[nx + self.n_acc + s];
                    if dv != 0.0 {
                        ineq.push((k * ni + nb + 2 * s, var, dv));
                        ineq.push((k * ni + nb + 2 * s + 1, var, -dv));
                    }
                }
            }
            for r in 0..nx {
                defect.push((k * nx + r, (k + 1) * nx + r, -1.0));
            }
            for &(row, col, v) in &bound_jac {
                ineq.push((k * ni + row, (k + 1) * nx + col, v));
            }
        }
        Ok(NlpDerivatives {
            objective_grad: grad,
            defect_jac: SparseMatrix {
                nrows: self.n_defects(),
                ncols: self.n_variables(),
                entries: defect,
            },
            ineq_jac: SparseMatrix {
                nrows: self.n_inequalities(),
                ncols: self.n_variables(),
                entries: ineq,
            },
        })
    }

    /// Constant Jacobian of the state-bound residuals with respect to one node.
    pub fn state_bound_jacobian(&self) -> Vec<(usize, usize, f64)> {
        match &self.spec.model {
            BatteryModel::Spm(m) => {
                let p = m.params();
                let n = crate::spm::N_NODES;
                let mut v = Vec::with_capacity(4 * n);
                for k in 0..n {
                    v.push((4 * k, k, -1.0 / p.pos.c_max));
                    v.push((4 * k + 1, k, 1.0 / p.pos.c_max));
                    v.push((4 * k + 2, n + k, -1.0 / p.neg.c_max));
                    v.push((4 * k + 3, n + k, 1.0 / p.neg.c_max));
                }
                v
            }
            _ => vec![(0, 0, -1.0), (1, 0, 1.0)],
        }
    }

    /// Controls of `w` as a profile.
    pub fn profile_of(&self, w: &[f64]) -> ControlProfile {
        let controls = w[self.control_offset()..].to_vec();
        ControlProfile::new(self.spec.model.control_unit(), self.spec.control_interval_s, controls)
            .expect("interval validated at assembly")
    }
}

struct EcmCost {
    value: f64,
    d_acc: [f64; 4],
    d_z: Vec<f64>,
    d_u: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bucket::BucketParams;

    fn bucket_spec(hours: usize) -> OcpSpec {
        let prices = PriceSeries::from_eur_per_mwh(&vec![40.0; hours]).unwrap();
        OcpSpec::new(BatteryModel::Bucket(BucketParams::default()), prices, Objective::Profit, vec![0.5])
    }

    #[test]
    fn counts_follow_the_formula() {
        let nlp = assemble_nlp(bucket_spec(48)).unwrap();
        assert_eq!(nlp.n_intervals, 192);
        assert_eq!(nlp.n_variables(), 193 + 192);
        assert_eq!(nlp.n_defects(), 192);
    }

    #[test]
    fn indivisible_or_empty_horizons_rejected() {
        let mut s = bucket_spec(2);
        s.horizon_s = 0.0;
        assert!(matches!(assemble_nlp(s), Err(Error::Config(_))));
        let mut s = bucket_spec(2);
        s.control_interval_s = 700.0;
        assert!(matches!(assemble_nlp(s), Err(Error::Config(_))));
        let mut s = bucket_spec(2);
        s.integration_step_s = 7.0;
        assert!(matches!(assemble_nlp(s), Err(Error::Config(_))));
        let mut s = bucket_spec(2);
        s.integration_step_s = 3.5;
        assert!(matches!(assemble_nlp(s), Err(Error::Config(_))));
    }

    #[test]
    fn rollout_has_zero_defects() {
        let nlp = assemble_nlp(bucket_spec(3)).unwrap();
        let u: Vec<f64> = (0..nlp.n_intervals).map(|k| (k as f64 - 5.0) * 0.7).collect();
        let r = nlp.rollout(&u).unwrap();
        let mut w = r.nodes.clone();
        w.extend_from_slice(&u);
        let v = nlp.evaluate(&w).unwrap();
        assert!(v.defects.iter().all(|d| *d == 0.0));
    }
}
