use std::path::{Path, PathBuf};
use std::process::ExitCode;

use blendnet::output::{create_dir, resolve_out_dir};
use blendnet::pacemaker::{pacemaker_experiment, write_report, PacemakerConfig, TrialStatus};
use blendnet::sweep::{parse_gains, sweep_gain, write_sweep};
use blendnet::{emit_plots, run_scenario, verify, HarnessError, ScenarioConfig};
use clap::{Parser, Subcommand};

/// Simulate heterogeneous multi-agent networks and the computations they
/// perform.
#[derive(Debug, Parser)]
#[command(name = "blendnet", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario file and write trajectory.csv and summary.json.
    Simulate { config: PathBuf },
    /// Run a scenario once per coupling gain and tabulate the errors.
    Sweep {
        /// Comma-separated gains, e.g. 50,100,200,400.
        #[arg(long, value_name = "LIST")]
        k: String,
        config: PathBuf,
    },
    /// Built-in numerical experiments.
    Experiment {
        #[command(subcommand)]
        which: Experiment,
    },
    /// Check a scenario's structural and blended-dynamics invariants.
    Verify { config: PathBuf },
    /// Render SVG plots from a run directory.
    Plot { run_dir: PathBuf },
}

#[derive(Debug, Subcommand)]
enum Experiment {
    /// Monte-Carlo spread of perturbed pacemaker networks.
    Pacemaker {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50.0)]
        k: f64,
        /// Standard deviation of the coefficient perturbations.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long)]
        t_end: Option<f64>,
    },
}

fn simulate(config: &Path) -> blendnet::Result<()> {
    let (out, dir) = run_scenario(config)?;
    let s = &out.summary;
    println!("wrote {}", dir.display());
    println!(
        "agents: {}, t_end: {}, sync error: {:.3e}",
        s.n_agents, s.t_end, s.sync_error
    );
    if let Some(o) = &s.oracle {
        println!("oracle target: {}, error: {:.3e}", o.target, o.error);
    }
    if let Some(d) = &s.decoded {
        println!("decoded: {d}");
    }
    for w in &s.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn sweep(list: &str, config: &Path) -> blendnet::Result<()> {
    let gains = parse_gains(list)?;
    let cfg = ScenarioConfig::load(config)?;
    let rows = sweep_gain(&cfg, &gains)?;
    let dir = resolve_out_dir(cfg.output.dir.as_deref(), &format!("{}-sweep", cfg.name()));
    create_dir(&dir)?;
    let path = dir.join("sweep.csv");
    write_sweep(&rows, &path)?;
    println!("{:>12} {:>14} {:>14}", "k", "oracle_error", "sync_error");
    for r in &rows {
        println!("{:>12} {:>14.6e} {:>14.6e}", r.k, r.oracle_error, r.sync_error);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn pacemaker(cfg: PacemakerConfig) -> blendnet::Result<()> {
    let report = pacemaker_experiment(&cfg)?;
    let dir = resolve_out_dir(None, &format!("pacemaker-n{}-seed{}", cfg.n_agents, cfg.seed));
    write_report(&report, &dir)?;
    for t in &report.trials {
        let status = match &t.status {
            TrialStatus::Oscillating => "oscillating".to_string(),
            TrialStatus::Settled => "settled".to_string(),
            TrialStatus::Failed(e) => format!("failed ({e})"),
        };
        println!(
            "trial {:>3}: {status}, amplitude {}, period {}",
            t.trial,
            t.amplitude.map_or("-".into(), |a| format!("{a:.4}")),
            t.period.map_or("-".into(), |p| format!("{p:.4}"))
        );
    }
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4e}"));
    println!(
        "amplitude std {}, period std {}, spread {}, failed {}",
        fmt(report.amplitude_std),
        fmt(report.period_std),
        fmt(report.spread),
        report.failed
    );
    println!("wrote {}", dir.display());
    Ok(())
}

fn run_verify(config: &Path) -> blendnet::Result<()> {
    let cfg = ScenarioConfig::load(config)?;
    let report = verify(&cfg)?;
    for c in &report.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<_> = report.failures().iter().map(|c| c.name).collect();
        Err(HarnessError::Verification(names.join(", ")))
    }
}

fn execute(cli: Cli) -> blendnet::Result<()> {
    match cli.command {
        Command::Simulate { config } => simulate(&config),
        Command::Sweep { k, config } => sweep(&k, &config),
        Command::Experiment {
            which:
                Experiment::Pacemaker {
                    n,
                    trials,
                    seed,
                    k,
                    scale,
                    t_end,
                },
        } => {
            let mut cfg = PacemakerConfig::new(n, trials, seed);
            cfg.k = k;
            cfg.scale = scale;
            if let Some(t) = t_end {
                cfg.t_end = t;
            }
            pacemaker(cfg)
        }
        Command::Verify { config } => run_verify(&config),
        Command::Plot { run_dir } => {
            for p in emit_plots(&run_dir)? {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Messages already carry their sources.
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
