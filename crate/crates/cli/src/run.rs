use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde_json::json;

use gridcell_core::bench::{benchmark_table, synthesize_fixtures, BenchTable, Dataset};
use gridcell_core::config::{default_spm, load_model};
use gridcell_core::horizon::{run_sliding, YearRun};
use gridcell_core::market::{load_prices, PriceFormat, PriceSeries, PER_MWH_TO_PER_WH};
use gridcell_core::model::ModelKind;
use gridcell_core::profile::{ControlProfile, ControlUnit};
use gridcell_core::spm::{Spm, SpmParams};
use gridcell_core::validation::{validate_profile, LedgerReport, Oracle, PlaybackMode};

use crate::scenario::Scenario;

/// State of charge every run starts from.
pub const INITIAL_SOC: f64 = 0.5;

pub const LEDGER_HEADER: &str =
    "scenario,model,objective,playback,revenue,cost,profit,lost_capacity_pct,scale_factor,lost_lithium_ah,substituted_days";

/// Files written by one run; renamed with a `.partial` suffix when the run fails.
struct Artifacts {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Artifacts {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("{}: cannot create output directory", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, body: &str) -> Result<()> {
        let p = self.dir.join(name);
        std::fs::write(&p, body).with_context(|| format!("{}: cannot write", p.display()))?;
        self.written.push(p);
        Ok(())
    }

    fn mark_partial(&self) {
        for p in &self.written {
            let mut target = p.clone().into_os_string();
            target.push(".partial");
            if let Err(e) = std::fs::rename(p, &target) {
                log::warn!("{}: {e}", p.display());
            }
        }
    }
}

pub struct RunOutcome {
    pub name: String,
    pub run: YearRun,
    pub ledger: LedgerReport,
    pub files: Vec<PathBuf>,
}

impl RunOutcome {
    pub fn ledger_row(&self, s: &Scenario) -> String {
        ledger_row(&self.name, s, &self.ledger, self.run.substitutions())
    }
}

pub fn ledger_row(name: &str, s: &Scenario, l: &LedgerReport, substituted: usize) -> String {
    format!(
        "{name},{},{},{},{},{},{},{},{},{},{substituted}",
        s.model.name(),
        s.objective.name(),
        s.playback.name(),
        l.revenue,
        l.degradation_cost,
        l.profit,
        l.lost_capacity_pct,
        l.scale_factor,
        l.lost_lithium_ah
    )
}

pub fn load_oracle(params: Option<&Path>) -> Result<Spm> {
    Ok(match params {
        Some(p) => Spm::new(SpmParams::load(p)?)?,
        None => default_spm()?,
    })
}

fn unit_column(unit: ControlUnit) -> &'static str {
    match unit {
        ControlUnit::Power => "power_w",
        ControlUnit::Current => "current_a",
    }
}

pub fn profile_csv(p: &ControlProfile) -> String {
    let mut s = format!("t_start_s,t_end_s,{}\n", unit_column(p.unit));
    for (k, v) in p.values.iter().enumerate() {
        let t = k as f64 * p.interval_s;
        let _ = writeln!(s, "{t},{},{v}", t + p.interval_s);
    }
    s
}

pub fn load_profile_csv(path: &Path) -> Result<ControlProfile> {
    let text = std::fs::read_to_string(path).with_context(|| format!("{}: cannot read profile", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| anyhow!("{}: empty profile", path.display()))?;
    let unit = match header.trim() {
        "t_start_s,t_end_s,power_w" => ControlUnit::Power,
        "t_start_s,t_end_s,current_a" => ControlUnit::Current,
        other => bail!("{}: unexpected header `{other}`", path.display()),
    };
    let mut values = Vec::new();
    let mut interval = None;
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<f64> = line
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("{}: line {}: malformed row", path.display(), i + 2))?;
        if f.len() != 3 {
            bail!("{}: line {}: expected 3 fields", path.display(), i + 2);
        }
        let width = f[1] - f[0];
        match interval {
            None => interval = Some(width),
            Some(w) if (w - width).abs() > 1e-9 * w => bail!("{}: line {}: intervals differ", path.display(), i + 2),
            _ => {}
        }
        values.push(f[2]);
    }
    let interval = interval.ok_or_else(|| anyhow!("{}: no rows", path.display()))?;
    Ok(ControlProfile::new(unit, interval, values)?)
}

fn trajectory_csv(run: &YearRun, prices: &PriceSeries) -> Result<String> {
    let per_hour = (3600.0 / run.profile.interval_s).round() as usize;
    let mut s = format!("hour,price_eur_mwh,{},soc\n", unit_column(run.profile.unit));
    for (h, chunk) in run.profile.values.chunks(per_hour.max(1)).enumerate() {
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        let price = prices.price_at(h as f64 * 3600.0)? / PER_MWH_TO_PER_WH;
        let _ = writeln!(s, "{h},{price},{mean},{}", run.hourly_soc[h + 1]);
    }
    Ok(s)
}

fn cumulative_csv(l: &LedgerReport, lambda: f64, n_cells: f64) -> String {
    let mut s = String::from("hour,revenue_eur,lost_lithium_ah,lithium_cost_eur\n");
    for (h, e) in l.hourly.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            h + 1,
            e.revenue,
            e.lost_lithium_ah,
            e.lost_lithium_ah * lambda * n_cells
        );
    }
    s
}

/// Optimises, validates and books one scenario, writing its artifacts.
pub fn run_scenario(s: &Scenario) -> Result<RunOutcome> {
    s.validate()?;
    let mut art = Artifacts::new(&s.output_dir)?;
    let mut log = String::new();
    let result = run_inner(s, &mut art, &mut log);
    if let Err(e) = &result {
        let _ = writeln!(log, "{}", json!({"event": "error", "message": format!("{e:#}")}));
        let _ = art.write("run.jsonl", &log);
        art.mark_partial();
    }
    result
}

fn run_inner(s: &Scenario, art: &mut Artifacts, log: &mut String) -> Result<RunOutcome> {
    let name = s.name();
    let _ = writeln!(
        log,
        "{}",
        json!({
            "event": "start",
            "scenario": name,
            "model": s.model.name(),
            "objective": s.objective.name(),
            "playback": s.playback.name(),
            "n_days": s.n_days,
            "seed": s.seed,
        })
    );
    let model = load_model(s.model, s.params.as_deref())?;
    let prices = load_prices(&s.prices, PriceFormat::HourlyCsv)?;
    let plan = s.plan();
    let x0 = model.state_at_soc(INITIAL_SOC);
    let run = run_sliding(&plan, &model, &prices, &x0)?;
    for d in &run.days {
        let _ = writeln!(log, "{}", json!({"event": "day", "record": d}));
        if d.substituted {
            log::warn!("{name}: day {} committed as rest", d.day);
        }
    }
    art.write("profile.csv", &profile_csv(&run.profile))?;
    art.write("trajectory.csv", &trajectory_csv(&run, &prices)?)?;

    let oracle = Oracle::at_soc(load_oracle(s.oracle_params.as_deref())?, INITIAL_SOC);
    let (_, ledger) = validate_profile(&run.profile, &prices, &oracle, s.playback)?;
    let _ = writeln!(log, "{}", json!({"event": "ledger", "report": ledger}));
    let p = oracle.model.params();
    art.write("cumulative.csv", &cumulative_csv(&ledger, p.lambda_degr_ah, p.n_cells))?;
    let row = ledger_row(&name, s, &ledger, run.substitutions());
    art.write("ledger.csv", &format!("{LEDGER_HEADER}\n{row}\n"))?;
    art.write("run.jsonl", log)?;
    Ok(RunOutcome {
        name,
        run,
        ledger,
        files: art.written.clone(),
    })
}

pub struct MatrixOutcome {
    pub csv: String,
    pub failures: usize,
    pub substitutions: usize,
}

/// Runs every scenario in turn and collects one ledger row per scenario.
pub fn run_matrix(scenarios: &[Scenario]) -> Result<MatrixOutcome> {
    if scenarios.is_empty() {
        bail!("matrix needs at least one scenario");
    }
    let mut csv = format!("{LEDGER_HEADER},status\n");
    let (mut failures, mut substitutions) = (0, 0);
    for s in scenarios {
        match run_scenario(s) {
            Ok(o) => {
                substitutions += o.run.substitutions();
                let _ = writeln!(csv, "{},ok", o.ledger_row(s));
            }
            Err(e) => {
                failures += 1;
                log::error!("{}: {e:#}", s.name());
                let msg = format!("{e:#}").replace([',', '\n'], ";");
                let _ = writeln!(
                    csv,
                    "{},{},{},{},,,,,,,,error: {msg}",
                    s.name(),
                    s.model.name(),
                    s.objective.name(),
                    s.playback.name()
                );
            }
        }
    }
    Ok(MatrixOutcome {
        csv,
        failures,
        substitutions,
    })
}

/// Scores all three models against every dataset in `data_dir`.
pub fn run_bench(data_dir: &Path) -> Result<BenchTable> {
    let datasets = Dataset::load_dir(data_dir)?;
    let models = [ModelKind::Bucket, ModelKind::Ecm, ModelKind::Spm]
        .into_iter()
        .map(|k| Ok((k.name().to_string(), load_model(k, None)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(benchmark_table(&datasets, &models))
}

pub fn synthesize(dir: &Path) -> Result<usize> {
    let sets = synthesize_fixtures(&default_spm()?)?;
    for d in &sets {
        d.write(dir)?;
    }
    Ok(sets.len())
}

/// Replays a stored profile through the oracle and books it.
pub fn validate_file(
    profile: &Path,
    prices: &Path,
    playback: PlaybackMode,
    oracle_params: Option<&Path>,
) -> Result<LedgerReport> {
    let profile = load_profile_csv(profile)?;
    let prices = load_prices(prices, PriceFormat::HourlyCsv)?;
    let oracle = Oracle::at_soc(load_oracle(oracle_params)?, INITIAL_SOC);
    Ok(validate_profile(&profile, &prices, &oracle, playback)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = ControlProfile::new(ControlUnit::Current, 900.0, vec![0.1, -2.5, 1.0 / 3.0]).unwrap();
        let path = dir.path().join("p.csv");
        std::fs::write(&path, profile_csv(&p)).unwrap();
        assert_eq!(load_profile_csv(&path).unwrap(), p);
    }
}
