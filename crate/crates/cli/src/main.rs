use std::io::{BufRead, ErrorKind, Write};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mrnav_core::policy::{run_policy, Policy};
use mrnav_core::runlog::MissionLog;
use mrnav_core::scenario::Scenario;
use mrnav_gateway::{Gateway, GatewayConfig, LoopConfig};

mod replay;

#[derive(Parser)]
#[command(name = "mrnav", version, about = "Minimap-driven drone navigation: scripted runs, live sessions and log replay")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scripted exploration policy headlessly and write the mission log.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// `frontier` or `teleop`.
        #[arg(long)]
        policy: Policy,
        /// Simulated seconds.
        #[arg(long)]
        budget: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve an interactive mission to one operator session.
    Serve {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 8765)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        /// Directory holding the operator UI bundle.
        #[arg(long)]
        static_dir: Option<PathBuf>,
        /// Simulated seconds per wall-clock second.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        /// Stop after this many wall-clock seconds instead of waiting for stdin to close.
        #[arg(long)]
        duration: Option<f64>,
        /// Where to write the mission log on exit.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a mission log and print its summary.
    Replay {
        #[arg(long)]
        log: PathBuf,
        /// Also print the explored-area series as `seconds,m2` lines.
        #[arg(long)]
        series: bool,
    },
}

fn load_scenario(path: &PathBuf) -> Result<Scenario> {
    Scenario::load(path).with_context(|| format!("loading scenario {}", path.display()))
}

fn save(log: &MissionLog, path: &PathBuf) -> Result<()> {
    log.save(path).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { scenario, policy, budget, seed, out } => {
            if !(budget > 0.0) {
                bail!("budget must be positive");
            }
            let scenario = load_scenario(&scenario)?;
            let log = run_policy(&scenario, policy, budget, seed);
            save(&log, &out)?;
            let summary = replay::summarize(&log)?;
            println!("{}: explored {:.2} m2 in {:.1} s", summary.run, summary.final_area, summary.duration);
        }
        Command::Serve { scenario, port, bind, static_dir, speed, duration, out } => {
            if !(speed > 0.0) {
                bail!("speed must be positive");
            }
            let scenario = load_scenario(&scenario)?;
            let config = GatewayConfig { static_dir, loop_config: LoopConfig { speed } };
            let gateway = Gateway::start(scenario, &format!("{bind}:{port}"), config).context("starting the gateway")?;
            eprintln!("listening on {} (raw TCP, WebSocket and HTTP)", gateway.local_addr());
            match duration {
                Some(secs) => std::thread::sleep(Duration::from_secs_f64(secs.max(0.0))),
                None => {
                    eprintln!("close stdin or type `quit` to stop");
                    let started = Instant::now();
                    for line in std::io::stdin().lock().lines() {
                        if line.map_or(true, |l| l.trim() == "quit") {
                            break;
                        }
                    }
                    eprintln!("stopping after {:.1} s", started.elapsed().as_secs_f64());
                }
            }
            let log = gateway.shutdown();
            if let Some(out) = out {
                save(&log, &out)?;
            }
        }
        Command::Replay { log, series } => {
            let log = MissionLog::load(&log).with_context(|| format!("reading {}", log.display()))?;
            let summary = replay::summarize(&log)?;
            let series = if series { mrnav_core::runlog::explored_series(&log)? } else { Vec::new() };
            let printed = (|| {
                let mut out = std::io::stdout().lock();
                write!(out, "{summary}")?;
                for (t, area) in series {
                    writeln!(out, "{t},{area}")?;
                }
                out.flush()
            })();
            match printed {
                Err(e) if e.kind() == ErrorKind::BrokenPipe => return Ok(()),
                r => r?,
            }
            if !summary.problems.is_empty() {
                bail!("{} consistency problem(s) in the log", summary.problems.len());
            }
        }
    }
    Ok(())
}
