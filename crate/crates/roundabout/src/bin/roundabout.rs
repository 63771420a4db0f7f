//! Command-line runner: executes one or more simulations and writes
//! trajectory CSV, summary JSON, and optional SVG profiles.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for I/O errors.

use clap::Parser;
use roundabout::config::{Controller, ScenarioConfig};
use roundabout::output::write_artifacts;
use roundabout::sim::{generate_arrivals, run_with_trace, trace_hash, Arrival};
use roundabout::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(
    name = "roundabout",
    about = "Single-lane roundabout CAV microsimulator",
    version
)]
struct Cli {
    /// Scenario TOML file; defaults apply for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Controller override: mpc-clbf | ocbf-fifo | ocbf-sdf | cf-baseline.
    #[arg(long)]
    controller: Option<String>,

    /// Planning horizon override; repeat the flag to sweep several values.
    #[arg(long)]
    horizon: Vec<usize>,

    /// Arrival-stream seed override.
    #[arg(long)]
    seed: Option<u64>,

    /// Simulated span override (s).
    #[arg(long)]
    duration: Option<f64>,

    /// Output directory for run artifacts.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,

    /// Also write SVG speed and control profiles.
    #[arg(long)]
    emit_plots: bool,

    /// Run every controller against the same arrival trace.
    #[arg(long)]
    compare: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Argument(_) => ExitCode::from(2),
                Error::Io(_) => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn execute(cli: &Cli) -> Result<(), Error> {
    let mut cfg = match &cli.config {
        Some(path) => ScenarioConfig::load(path)?,
        None => ScenarioConfig::default(),
    };
    if let Some(c) = &cli.controller {
        cfg.controller = c.parse()?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = cli.duration {
        cfg.duration = d;
    }
    cfg.validate()?;

    let horizons = if cli.horizon.is_empty() { vec![cfg.horizon] } else { cli.horizon.clone() };
    let trace = generate_arrivals(&cfg);
    println!(
        "arrival trace: {} CAVs over {:.0} s (seed {}, hash {:016x})",
        trace.len(),
        cfg.duration,
        cfg.seed,
        trace_hash(&trace)
    );

    let controllers: Vec<Controller> = if cli.compare {
        vec![
            Controller::MpcClbf,
            Controller::OcbfFifo,
            Controller::OcbfSdf,
            Controller::CfBaseline,
        ]
    } else {
        vec![cfg.controller]
    };

    for controller in controllers {
        // the horizon sweep only affects the receding-horizon controller
        let sweep: &[usize] =
            if controller == Controller::MpcClbf { &horizons } else { &horizons[..1] };
        for &h in sweep {
            run_one(cli, &cfg, controller, h, &trace)?;
            if controller != Controller::MpcClbf {
                break;
            }
        }
    }
    Ok(())
}

fn run_one(
    cli: &Cli,
    base: &ScenarioConfig,
    controller: Controller,
    horizon: usize,
    trace: &[Arrival],
) -> Result<(), Error> {
    let cfg = ScenarioConfig { controller, horizon, ..base.clone() };
    cfg.validate()?;
    let result = run_with_trace(&cfg, trace)?;
    let s = &result.summary;
    let prefix = match controller {
        Controller::MpcClbf => format!("{}_h{}", controller.name(), horizon),
        _ => controller.name().to_string(),
    };
    let written = write_artifacts(&cli.out_dir, &prefix, &result, cli.emit_plots)?;
    println!(
        "{prefix}: exits {} / arrivals {}, time {:.1} s, energy {:.1}, objective {:.1}, \
         unsafe {}, infeasible {}, fallback {}",
        s.exits,
        s.arrivals,
        s.total_time,
        s.total_energy,
        s.total_objective,
        s.unsafe_count,
        s.infeasible_count,
        s.fallback_steps
    );
    for p in written {
        println!("  wrote {}", p.display());
    }
    Ok(())
}
