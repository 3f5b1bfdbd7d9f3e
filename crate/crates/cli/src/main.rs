use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use gridcell::run::{run_bench, run_matrix, run_scenario, synthesize, validate_file, LEDGER_HEADER};
use gridcell::scenario::{PlanOverrides, Scenario};
use gridcell::{EXIT_DEGRADED, EXIT_ERROR};
use gridcell_core::model::ModelKind;
use gridcell_core::ocp::Objective;
use gridcell_core::validation::PlaybackMode;

#[derive(Parser)]
#[command(name = "gridcell", version, about = "Battery price-arbitrage scenarios and degradation benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimise a sliding-window run, validate it and write its artifacts.
    Run(RunArgs),
    /// Run several scenario files and emit one ledger row per scenario.
    Matrix {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        /// Combined CSV; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score the three models against measured capacity series.
    Bench {
        /// Directory of dataset descriptors (`*.toml`) and measurements (`*.csv`).
        #[arg(long, default_value = "data/bench")]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write synthetic fixtures generated by the single-particle model into `--data` first.
        #[arg(long)]
        synthesize: bool,
    },
    /// Replay a stored profile through the single-particle model and book it.
    Validate {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        prices: PathBuf,
        #[arg(long, default_value = "rescale")]
        playback: PlaybackMode,
        #[arg(long)]
        oracle_params: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file; flags below override its entries.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    objective: Option<Objective>,
    #[arg(long)]
    playback: Option<PlaybackMode>,
    #[arg(long)]
    days: Option<usize>,
    #[arg(long)]
    prices: Option<PathBuf>,
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iter: Option<usize>,
}

impl RunArgs {
    fn scenario(self) -> Result<Scenario> {
        let mut s = match &self.scenario {
            Some(p) => Scenario::load(p)?,
            None => Scenario {
                name: None,
                model: self.model.context("--model is required without --scenario")?,
                objective: self.objective.context("--objective is required without --scenario")?,
                playback: PlaybackMode::Rescale,
                n_days: self.days.context("--days is required without --scenario")?,
                prices: self.prices.clone().context("--prices is required without --scenario")?,
                params: None,
                oracle_params: None,
                output_dir: PathBuf::from("out"),
                seed: 7,
                plan: PlanOverrides::default(),
            },
        };
        if let Some(v) = self.model {
            s.model = v;
        }
        if let Some(v) = self.objective {
            s.objective = v;
        }
        if let Some(v) = self.playback {
            s.playback = v;
        }
        if let Some(v) = self.days {
            s.n_days = v;
        }
        if let Some(v) = self.prices {
            s.prices = v;
        }
        if let Some(v) = self.params {
            s.params = Some(v);
        }
        if let Some(v) = self.out {
            s.output_dir = v;
        }
        if let Some(v) = self.seed {
            s.seed = v;
        }
        if let Some(v) = self.max_iter {
            s.plan.max_iter = Some(v);
        }
        Ok(s)
    }
}

fn emit(out: Option<&PathBuf>, body: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, body).with_context(|| format!("{}: cannot write", p.display())),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn execute(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Run(args) => {
            let s = args.scenario()?;
            let o = run_scenario(&s)?;
            println!("{LEDGER_HEADER}");
            println!("{}", o.ledger_row(&s));
            Ok(if o.run.substitutions() > 0 { EXIT_DEGRADED } else { 0 })
        }
        Command::Matrix { scenarios, out } => {
            let list = scenarios.iter().map(Scenario::load).collect::<Result<Vec<_>>>()?;
            let m = run_matrix(&list)?;
            emit(out.as_ref(), &m.csv)?;
            Ok(if m.failures > 0 {
                EXIT_ERROR
            } else if m.substitutions > 0 {
                EXIT_DEGRADED
            } else {
                0
            })
        }
        Command::Bench { data, out, synthesize: synth } => {
            if synth {
                let n = synthesize(&data)?;
                log::info!("wrote {n} synthetic datasets to {}", data.display());
            }
            let table = run_bench(&data)?;
            for r in &table.rows {
                for n in &r.notes {
                    log::warn!("{}: {n}", r.model);
                }
            }
            emit(out.as_ref(), &table.to_csv())?;
            Ok(0)
        }
        Command::Validate {
            profile,
            prices,
            playback,
            oracle_params,
        } => {
            let l = validate_file(&profile, &prices, playback, oracle_params.as_deref())?;
            if l.scale_factor < 1.0 {
                log::info!("profile scaled by {}", l.scale_factor);
            }
            println!("playback,revenue,cost,profit,lost_capacity_pct,scale_factor,lost_lithium_ah");
            println!(
                "{},{},{},{},{},{},{}",
                playback.name(),
                l.revenue,
                l.degradation_cost,
                l.profit,
                l.lost_capacity_pct,
                l.scale_factor,
                l.lost_lithium_ah
            );
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
