use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical meaning of a control value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlUnit {
    /// Power in W, positive charges the battery.
    Power,
    /// Current in A, positive charges the battery.
    Current,
}

/// Piecewise-constant control, one value per interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlProfile {
    pub unit: ControlUnit,
    pub interval_s: f64,
    pub values: Vec<f64>,
}

impl ControlProfile {
    pub fn new(unit: ControlUnit, interval_s: f64, values: Vec<f64>) -> Result<Self> {
        if !(interval_s > 0.0) {
            return Err(Error::Config(format!("control interval {interval_s} s must be positive")));
        }
        Ok(Self {
            unit,
            interval_s,
            values,
        })
    }

    pub fn zeros(unit: ControlUnit, interval_s: f64, n: usize) -> Self {
        Self {
            unit,
            interval_s,
            values: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn horizon_s(&self) -> f64 {
        self.values.len() as f64 * self.interval_s
    }

    /// Control applied at `t_s`; intervals are closed on the left.
    pub fn value_at(&self, t_s: f64) -> Result<f64> {
        if !(t_s >= 0.0 && t_s < self.horizon_s()) {
            return Err(Error::Range(format!(
                "t = {t_s} s outside profile horizon [0, {})",
                self.horizon_s()
            )));
        }
        Ok(self.values[(t_s / self.interval_s).floor() as usize])
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// ∫|u| dt in value·hours.
    pub fn abs_integral_h(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum::<f64>() * self.interval_s / 3600.0
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            unit: self.unit,
            interval_s: self.interval_s,
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }

    /// Concatenates profiles with identical unit and interval.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a ControlProfile>) -> Result<Self> {
        let mut iter = parts.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::Config("cannot concatenate zero profiles".into()))?;
        let mut out = first.clone();
        for p in iter {
            if p.unit != out.unit || p.interval_s != out.interval_s {
                return Err(Error::Config("profiles differ in unit or interval".into()));
            }
            out.values.extend_from_slice(&p.values);
        }
        Ok(out)
    }
}
