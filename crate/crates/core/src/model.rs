//! Uniform view of the three battery models as flat state vectors, used by the
//! optimiser, the horizon driver and the benchmarks.

use serde::{Deserialize, Serialize};

use crate::bucket::{BucketParams, SOC_TOLERANCE};
use crate::ecm::{ecm_step_unchecked, ecm_voltage, EcmParams, EcmState, SchmalstiegParams};
use crate::error::{Error, Result};
use crate::profile::ControlUnit;
use crate::spm::{self, Spm, SpmState, N_NODES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Bucket,
    Ecm,
    Spm,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Bucket => "bucket",
            ModelKind::Ecm => "ecm",
            ModelKind::Spm => "spm",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bucket" => Ok(ModelKind::Bucket),
            "ecm" => Ok(ModelKind::Ecm),
            "spm" => Ok(ModelKind::Spm),
            other => Err(Error::Config(format!("unknown model `{other}` (bucket, ecm, spm)"))),
        }
    }
}

/// Equivalent-circuit model paired with its degradation law.
#[derive(Debug, Clone, PartialEq)]
pub struct EcmModel {
    pub params: EcmParams,
    pub degradation: SchmalstiegParams,
}

#[derive(Debug, Clone)]
pub enum BatteryModel {
    Bucket(BucketParams),
    Ecm(EcmModel),
    Spm(Spm),
}

impl BatteryModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            BatteryModel::Bucket(_) => ModelKind::Bucket,
            BatteryModel::Ecm(_) => ModelKind::Ecm,
            BatteryModel::Spm(_) => ModelKind::Spm,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            BatteryModel::Bucket(_) => 1,
            BatteryModel::Ecm(_) => 2,
            BatteryModel::Spm(_) => spm::STATE_DIM,
        }
    }

    pub fn control_unit(&self) -> ControlUnit {
        match self {
            BatteryModel::Bucket(_) => ControlUnit::Power,
            _ => ControlUnit::Current,
        }
    }

    pub fn n_cells(&self) -> f64 {
        match self {
            BatteryModel::Bucket(p) => p.n_cells,
            BatteryModel::Ecm(m) => m.params.n_cells,
            BatteryModel::Spm(m) => m.params().n_cells,
        }
    }

    pub fn set_n_cells(&mut self, n: f64) {
        match self {
            BatteryModel::Bucket(p) => p.n_cells = n,
            BatteryModel::Ecm(m) => m.params.n_cells = n,
            BatteryModel::Spm(m) => {
                let mut p = m.params().clone();
                p.n_cells = n;
                *m = Spm::new(p).expect("validated parameters stay valid").with_side_reaction(m.side_reaction());
            }
        }
    }

    /// Default control bound: 1C for current-controlled models, one full charge per
    /// hour for the bucket.
    pub fn one_c(&self) -> f64 {
        match self {
            BatteryModel::Bucket(p) => p.e_wh,
            BatteryModel::Ecm(m) => m.params.e_ah,
            BatteryModel::Spm(m) => m.params().nominal_ah,
        }
    }

    pub fn voltage_limits(&self) -> Option<(f64, f64)> {
        match self {
            BatteryModel::Bucket(_) => None,
            BatteryModel::Ecm(m) => Some((m.params.v_min, m.params.v_max)),
            BatteryModel::Spm(m) => Some((m.params().v_min, m.params().v_max)),
        }
    }

    /// Relaxed state at state of charge `z`.
    pub fn state_at_soc(&self, z: f64) -> Vec<f64> {
        match self {
            BatteryModel::Bucket(_) => vec![z],
            BatteryModel::Ecm(_) => vec![z, 0.0],
            BatteryModel::Spm(m) => m.state_at_soc(z).to_array().to_vec(),
        }
    }

    pub fn soc(&self, x: &[f64]) -> f64 {
        match self {
            BatteryModel::Spm(m) => m.soc(&SpmState::from_slice(x)),
            _ => x[0],
        }
    }

    /// Terminal voltage under control `u`, if the model has one.
    pub fn voltage(&self, x: &[f64], u: f64) -> Result<Option<f64>> {
        Ok(match self {
            BatteryModel::Bucket(_) => None,
            BatteryModel::Ecm(m) => Some(ecm_voltage(&EcmState { z: x[0], i_r: x[1] }, u, &m.params)),
            BatteryModel::Spm(m) => Some(m.rhs(&SpmState::from_slice(x), u)?.voltage),
        })
    }

    /// One forward-Euler step in place; returns the voltage at the start of the step.
    #[inline]
    pub fn step(&self, x: &mut [f64], u: f64, dt: f64) -> Result<Option<f64>> {
        match self {
            BatteryModel::Bucket(p) => {
                x[0] += u * dt / (p.e_wh * 3600.0);
                Ok(None)
            }
            BatteryModel::Ecm(m) => {
                let s = EcmState { z: x[0], i_r: x[1] };
                let v = ecm_voltage(&s, u, &m.params);
                let next = ecm_step_unchecked(s, u, dt, &m.params).state;
                x[0] = next.z;
                x[1] = next.i_r;
                Ok(Some(v))
            }
            BatteryModel::Spm(m) => {
                let s = SpmState::from_slice(x);
                let ev = m.rhs(&s, u)?;
                for (xi, di) in x.iter_mut().zip(&ev.deriv) {
                    *xi += dt * di;
                }
                Ok(Some(ev.voltage))
            }
        }
    }

    /// Number of entries written by [`BatteryModel::state_bound_residuals`].
    pub fn n_state_bounds(&self) -> usize {
        match self {
            BatteryModel::Spm(_) => 4 * N_NODES,
            _ => 2,
        }
    }

    /// Bound residuals `g ≤ 0` for the state: SoC in [0, 1], or every node
    /// concentration in [0, c_max] (as fractions of c_max).
    pub fn state_bound_residuals(&self, x: &[f64], out: &mut [f64]) {
        match self {
            BatteryModel::Spm(m) => {
                let p = m.params();
                for k in 0..N_NODES {
                    let yp = x[k] / p.pos.c_max;
                    let yn = x[N_NODES + k] / p.neg.c_max;
                    out[4 * k] = -yp;
                    out[4 * k + 1] = yp - 1.0;
                    out[4 * k + 2] = -yn;
                    out[4 * k + 3] = yn - 1.0;
                }
            }
            _ => {
                out[0] = -x[0];
                out[1] = x[0] - 1.0;
            }
        }
    }

    /// Tolerance on the state-bound residuals.
    pub fn state_bound_tolerance(&self) -> f64 {
        match self {
            BatteryModel::Spm(_) => spm::CONCENTRATION_TOLERANCE,
            _ => SOC_TOLERANCE,
        }
    }

    /// Characteristic magnitude of each state entry, for finite-difference steps.
    pub fn state_scale(&self) -> Vec<f64> {
        match self {
            BatteryModel::Bucket(_) => vec![1.0],
            BatteryModel::Ecm(m) => vec![1.0, m.params.e_ah],
            BatteryModel::Spm(m) => {
                let p = m.params();
                let mut s = vec![p.pos.c_max; N_NODES];
                s.extend(std::iter::repeat(p.neg.c_max).take(N_NODES));
                s.push(p.thermal.t_ref);
                s.push(p.sei.delta0_m);
                s.push(1e-3 * p.nominal_ah);
                s
            }
        }
    }

    /// Currency per unit of the model's degradation measure (Wh or Ah).
    pub fn lambda_degr(&self) -> f64 {
        match self {
            BatteryModel::Bucket(p) => p.lambda_degr_wh,
            BatteryModel::Ecm(m) => m.params.lambda_degr_ah,
            BatteryModel::Spm(m) => m.params().lambda_degr_ah,
        }
    }
}
