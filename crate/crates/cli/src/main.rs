use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use risac::harness::{
    emit_csv, preset, run_mobility_preset, run_preset, run_trial, sweep_tradeoff, write_csv, write_mobility_csv,
    Algorithm, HarnessError, MetricsTable, Setup,
};

#[derive(Parser)]
#[command(name = "risac", version, about = "RIS-aided MIMO ISAC link simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo trade-off sweep for one scenario.
    Simulate {
        /// TOML file whose keys override the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "default")]
        preset: String,
        /// Algorithms to run (repeatable); defaults to the scenario's list.
        #[arg(long, value_delimiter = ',')]
        algorithm: Vec<Algorithm>,
        /// Comma-separated trade-off factors.
        #[arg(long, value_delimiter = ',')]
        rho_grid: Vec<f64>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One end-to-end localization run at the fixed demo position.
    SenseDemo {
        #[arg(long)]
        noiseless: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Runs every scenario of a bundled preset.
    Sweep {
        #[arg(long)]
        preset: String,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output(table: &MetricsTable, out: Option<PathBuf>) -> Result<(), HarnessError> {
    match out {
        Some(path) => emit_csv(table, &path),
        None => write_csv(table, std::io::stdout().lock()),
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Simulate { config, preset: name, algorithm, rho_grid, trials, seed, out } => {
            let p = preset(&name)?;
            let mut cfg = p.scenarios[0].clone();
            if let Some(path) = config {
                cfg = cfg.merged_with_toml(&std::fs::read_to_string(&path)?)?;
            }
            if !algorithm.is_empty() {
                cfg.algorithms = algorithm;
            }
            if !rho_grid.is_empty() {
                cfg.rho_grid = rho_grid;
            }
            cfg.n_trials = trials.unwrap_or(cfg.n_trials);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.validate()?;
            for (k, v) in risac::harness::describe(&cfg) {
                log::debug!("{k} = {v}");
            }
            let algs = cfg.algorithms.clone();
            output(&sweep_tradeoff(&cfg, &algs)?, out)
        }
        Command::SenseDemo { noiseless, seed } => {
            let mut cfg = preset("demo")?.scenarios[0].clone();
            cfg.noiseless_sensing = noiseless;
            cfg.seed = seed;
            let setup = Setup::new(&cfg)?;
            let r = run_trial(&setup, Algorithm::SSdr, cfg.rho_grid[0], &mut setup.trial_rng(0))
                .map_err(|f| HarnessError::FailureThreshold { failed: 1, total: 1, first: f.to_string() })?;
            let mut so = std::io::stdout().lock();
            let p = |v: risac::array_geometry::Vec3| format!("({:.6}, {:.6}, {:.6})", v.x, v.y, v.z);
            writeln!(so, "true UE position   {}", p(r.ue_pos))?;
            writeln!(so, "phase-1 estimate   {}  error {:.3e} m", p(r.estimate1.position), r.pos_err1)?;
            writeln!(so, "phase-2 estimate   {}  error {:.3e} m", p(r.estimate2.position), r.pos_err2)?;
            writeln!(so, "rate phase 1/2     {:.3} / {:.3} bps/Hz", r.rate_phase1, r.rate_phase2)?;
            let ok = !noiseless || r.pos_err2 < 1e-6;
            writeln!(so, "{}", if ok { "OK" } else { "FAIL: noiseless error above 1e-6 m" })?;
            if !ok {
                return Err(HarnessError::FailureThreshold { failed: 1, total: 1, first: "inexact localization".into() });
            }
            Ok(())
        }
        Command::Sweep { preset: name, trials, seed, out } => {
            let mut p = preset(&name)?;
            for s in &mut p.scenarios {
                s.n_trials = trials.unwrap_or(s.n_trials);
                s.seed = seed.unwrap_or(s.seed);
            }
            if p.mobility {
                let rows = run_mobility_preset(&p)?;
                match out {
                    Some(path) => write_mobility_csv(&rows, std::io::BufWriter::new(std::fs::File::create(path)?)),
                    None => write_mobility_csv(&rows, std::io::stdout().lock()),
                }
            } else {
                output(&run_preset(&p)?, out)
            }
        }
    }
}

fn exit_code(e: &HarnessError) -> u8 {
    match e {
        HarnessError::Config(_) => 2,
        HarnessError::FailureThreshold { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
