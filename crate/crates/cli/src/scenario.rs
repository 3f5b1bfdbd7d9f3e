use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use gridcell_core::horizon::WindowPlan;
use gridcell_core::model::ModelKind;
use gridcell_core::ocp::Objective;
use gridcell_core::validation::PlaybackMode;

fn default_playback() -> PlaybackMode {
    PlaybackMode::Rescale
}

fn default_seed() -> u64 {
    7
}

/// Optional changes to the sliding-window defaults.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanOverrides {
    pub window_days: Option<usize>,
    pub control_interval_s: Option<f64>,
    pub voltage_backoff_v: Option<f64>,
    pub max_iter: Option<usize>,
}

/// One run: a model, an objective, a playback mode and where the data lives.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: Option<String>,
    pub model: ModelKind,
    pub objective: Objective,
    #[serde(default = "default_playback")]
    pub playback: PlaybackMode,
    pub n_days: usize,
    pub prices: PathBuf,
    /// Model parameter file; shipped defaults when absent.
    #[serde(default)]
    pub params: Option<PathBuf>,
    /// Parameters of the validating single-particle model.
    #[serde(default)]
    pub oracle_params: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Recorded with every run; the solvers themselves are deterministic.
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub plan: PlanOverrides,
}

impl Scenario {
    /// Reads a scenario file; relative paths are taken from the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).with_context(|| format!("{}: cannot read scenario", path.display()))?;
        let mut s: Scenario = toml::from_str(&text).with_context(|| format!("{}: invalid scenario", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut s.prices);
        fix(&mut s.output_dir);
        if let Some(p) = s.params.as_mut() {
            fix(p);
        }
        if let Some(p) = s.oracle_params.as_mut() {
            fix(p);
        }
        if s.name.is_none() {
            s.name = path.file_stem().map(|x| x.to_string_lossy().into_owned());
        }
        Ok(s)
    }

    pub fn name(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| format!("{}_{}", self.model.name(), self.objective.name()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_days == 0 {
            bail!("n_days must be at least 1");
        }
        for p in [Some(&self.prices), self.params.as_ref(), self.oracle_params.as_ref()]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                bail!("{}: file not found", p.display());
            }
        }
        Ok(())
    }

    pub fn plan(&self) -> WindowPlan {
        let mut plan = WindowPlan::new(self.n_days, self.objective);
        let o = &self.plan;
        if let Some(w) = o.window_days {
            plan.window_days = w;
        }
        if let Some(c) = o.control_interval_s {
            plan.control_interval_s = c;
        }
        if let Some(b) = o.voltage_backoff_v {
            plan.voltage_backoff_v = b;
        }
        if let Some(m) = o.max_iter {
            plan.solver.max_iter = m;
        }
        plan
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.toml");
        std::fs::write(
            &p,
            "model = \"bucket\"\nobjective = \"profit\"\nn_days = 2\nprices = \"p.csv\"\noutput_dir = \"out\"\n[plan]\nmax_iter = 50\n",
        )
        .unwrap();
        let s = Scenario::load(&p).unwrap();
        assert_eq!(s.prices, dir.path().join("p.csv"));
        assert_eq!(s.name(), "s");
        assert_eq!(s.playback, PlaybackMode::Rescale);
        assert_eq!(s.plan().solver.max_iter, 50);
        assert!(s.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.toml");
        std::fs::write(&p, "model = \"bucket\"\nobjective = \"profit\"\nn_days = 2\nprices = \"p.csv\"\noutput_dir = \"o\"\ncolour = 1\n").unwrap();
        assert!(Scenario::load(&p).is_err());
    }
}
