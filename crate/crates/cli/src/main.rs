use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use mixsense_core::bench::monte_carlo;
use mixsense_core::config::ScenarioConfig;
use mixsense_core::report::{emit_traces, latency_report};
use mixsense_core::rng::{stream, Stream};
use mixsense_core::scenario::{calibrate_attack, run_scenario};
use mixsense_core::SimError;

/// Mixed-reality UAV GNSS spoofing simulator.
#[derive(Parser)]
#[command(name = "mixsense", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its traces.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo over consecutive seeds.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        runs: usize,
        #[arg(long, value_enum, default_value = "on")]
        attack: Toggle,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-stage and end-to-end GNSS emulation latency, CSV on stdout.
    LatencyReport {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
    },
    /// Largest ramp rate the onboard monitor does not see.
    CalibrateAttack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        margin: Option<f64>,
    },
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        if e.is_config() {
            Failure::Config(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn load(path: &Path) -> Result<ScenarioConfig, Failure> {
    ScenarioConfig::load(path).map_err(|e| Failure::Config(e.into()))
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let cfg = load(&config)?;
            let run = run_scenario(&cfg, seed)?;
            emit_traces(&run.trace, &run.metrics, &out)?;
            let mut resolved = cfg.clone();
            resolved.seed = run.metrics.seed;
            std::fs::write(out.join("config.json"), resolved.to_json() + "\n")
                .with_context(|| format!("writing {}", out.join("config.json").display()))?;
            if let Some(cal) = &run.calibration {
                let text = serde_json::to_string_pretty(cal).expect("calibration serializes");
                std::fs::write(out.join("calibration.json"), text + "\n")
                    .with_context(|| format!("writing calibration into {}", out.display()))?;
            }
            println!(
                "{}",
                serde_json::to_string_pretty(&run.metrics).expect("metrics serialize")
            );
        }
        Command::Bench {
            config,
            runs,
            attack,
            out,
        } => {
            let cfg = load(&config)?;
            let report = monte_carlo(&cfg, runs, attack == Toggle::Off)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            std::fs::write(out.join("bench.json"), json + "\n")
                .with_context(|| format!("writing {}", out.join("bench.json").display()))?;
            let mut csv = String::from("kind,seed,time_to_detect_s,max_deviation_m,post_mitigation_error_m,offboard_false_alarm,onboard_flags\n");
            let rows = report
                .attack_runs
                .iter()
                .map(|m| ("attack", m))
                .chain(report.control_runs.iter().map(|m| ("control", m)));
            for (kind, m) in rows {
                let ttd = m
                    .time_to_detect_s
                    .map(|t| t.to_string())
                    .unwrap_or_default();
                writeln!(
                    csv,
                    "{kind},{},{ttd},{},{},{},{}",
                    m.seed,
                    m.max_deviation_m,
                    m.post_mitigation_error_m,
                    m.offboard_false_alarm,
                    m.onboard_flags
                )
                .expect("write to string");
            }
            std::fs::write(out.join("runs.csv"), csv)
                .with_context(|| format!("writing {}", out.join("runs.csv").display()))?;
            if let Some(a) = &report.attack {
                let median = a.time_to_detect_s.map(|q| q.median);
                println!(
                    "detected {}/{} (median time to detect {:?} s)",
                    a.detected, a.runs, median
                );
            }
            let c = &report.control;
            println!("control false alarms {}/{}", c.false_alarms, c.runs);
            if !report.failures.is_empty() {
                eprintln!("{} run(s) failed; see bench.json", report.failures.len());
            }
        }
        Command::LatencyReport { config, samples } => {
            let cfg = load(&config)?;
            let mut rng = stream(cfg.seed, Stream::GnssLatency);
            print!(
                "{}",
                latency_report(&cfg.gnss.latency, samples, &mut rng)?.to_csv()
            );
        }
        Command::CalibrateAttack { config, margin } => {
            let cfg = load(&config)?;
            let cal = calibrate_attack(&cfg, margin.unwrap_or(cfg.attack.margin))?;
            println!(
                "{}",
                serde_json::to_string_pretty(&cal).expect("calibration serializes")
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
