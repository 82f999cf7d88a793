//! `telelink` command-line harness.
//!
//! Exit codes: 0 success, 1 failed expectation or NoGo, 2 usage or
//! configuration error.

mod feed;
mod serve;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use telelink::linksim::{run_scenario, Scenario, ScenarioError, Simulator};
use telelink::sysmon::{aggregate, format_table, AggregatePolicy, Decision};

const EXIT_FAIL: u8 = 1;
const EXIT_USAGE: u8 = 2;

/// Simulated time `checks` lets the system settle before reading results.
const CHECK_SETTLE_NS: u64 = 2_000_000_000;

#[derive(Parser)]
#[command(name = "telelink", version, about = "Dual-link teleoperation transport simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario to completion and write metrics.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Settle a configuration and print the sysmon check table.
    Checks {
        #[arg(env = "TELELINK_CONFIG")]
        config: Option<PathBuf>,
    },
    /// Run a scenario in paced mode and serve the WebSocket feed.
    Serve {
        scenario: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory of static files served next to the feed.
        #[arg(long)]
        assets: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match cli.command {
        Command::Run { scenario, seed, out } => cmd_run(&scenario, seed, &out),
        Command::Checks { config } => cmd_checks(config.as_deref()),
        Command::Serve {
            scenario,
            bind,
            speed,
            seed,
            assets,
        } => {
            let sc = match load(&scenario, seed) {
                Ok(sc) => sc,
                Err(code) => return code,
            };
            if !(speed.is_finite() && speed > 0.0) {
                eprintln!("error: --speed must be a positive number");
                return ExitCode::from(EXIT_USAGE);
            }
            serve::cmd_serve(sc, bind, speed, assets)
        }
    }
}

/// Loads a scenario, trying `<path>.scn` when `path` does not exist.
fn load(path: &Path, seed: Option<u64>) -> Result<Scenario, ExitCode> {
    let with_ext = path.with_extension("scn");
    let path = if !path.exists() && with_ext.exists() { &with_ext } else { path };
    match Scenario::load(path) {
        Ok(mut sc) => {
            if let Some(seed) = seed {
                sc.seed = seed;
            }
            Ok(sc)
        }
        Err(e) => {
            eprintln!("error: {e}");
            Err(ExitCode::from(EXIT_USAGE))
        }
    }
}

fn cmd_run(path: &Path, seed: Option<u64>, out: &Path) -> ExitCode {
    let sc = match load(path, seed) {
        Ok(sc) => sc,
        Err(code) => return code,
    };
    let report = match run_scenario(&sc) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    if let Err(e) = report.write_to(out) {
        eprintln!("error: cannot write metrics to {}: {e}", out.display());
        return ExitCode::from(EXIT_USAGE);
    }
    println!(
        "{}: seed {} ran {:.1} s, metrics in {}",
        report.scenario,
        report.seed,
        report.duration_s,
        out.display()
    );
    for e in &report.expectations {
        let line = format!("expect {} (actual {})", e.expectation, e.actual.map_or("missing".into(), |v| format!("{v}")));
        if e.pass {
            println!("  ok   {line}");
        } else {
            eprintln!("  FAIL {line}");
        }
    }
    if report.expectations_hold() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_FAIL)
    }
}

fn cmd_checks(config: Option<&Path>) -> ExitCode {
    let Some(path) = config else {
        eprintln!("error: no config given and TELELINK_CONFIG is not set");
        return ExitCode::from(EXIT_USAGE);
    };
    let sc = match load(path, None) {
        Ok(sc) => sc,
        Err(code) => return code,
    };
    let mut sim = match Simulator::new(&sc) {
        Ok(sim) => sim,
        Err(e) => return usage_error(e),
    };
    sim.run_until(CHECK_SETTLE_NS.min(sc.duration_ns));
    let results = sim.checks();
    print!("{}", format_table(results));
    let verdict = aggregate(results, AggregatePolicy::default());
    if let Some(w) = &verdict.warning {
        eprintln!("warning: {w}");
    }
    match verdict.decision {
        Decision::Go => {
            println!("GO");
            ExitCode::SUCCESS
        }
        Decision::NoGo => {
            println!("NO-GO");
            ExitCode::from(EXIT_FAIL)
        }
    }
}

fn usage_error(e: ScenarioError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(EXIT_USAGE)
}
