use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use motionstack::maneuver::{build_disjoint_intervals, resolve, Side, Trait};
use motionstack::map::load_map;
use motionstack_sim::scenario::{parse_scenario, resolve as resolve_scenario};
use motionstack_sim::{run, StepOptions};
use serde::Deserialize;

const EXIT_USAGE: u8 = 64;
const EXIT_DATA: u8 = 65;

#[derive(Parser)]
#[command(name = "motionstack", version, about = "Scenario runner for the motionstack pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and report metrics.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dt: Option<f64>,
        /// JSON-lines step log.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        metrics_out: Option<PathBuf>,
        #[arg(long)]
        disable_guards: bool,
        /// Vehicle profile replacing the scenario's.
        #[arg(long)]
        profile: Option<String>,
    },
    /// Check a map document.
    Validate {
        #[arg(long)]
        map: PathBuf,
    },
    /// Print the disjoint intervals and the consent for a trait set.
    ResolveDemo {
        #[arg(long)]
        traits: PathBuf,
    },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TraitFile {
    Bare(Vec<RawTrait>),
    WithSide {
        #[serde(default)]
        side: Side,
        traits: Vec<RawTrait>,
    },
}

#[derive(Deserialize)]
struct RawTrait {
    lo: f64,
    hi: f64,
    weight: f64,
    #[serde(default)]
    source: String,
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn read(path: &Path) -> Result<String, ExitCode> {
    std::fs::read_to_string(path).map_err(|e| fail(EXIT_DATA, format!("{}: {e}", path.display())))
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    scenario: &Path,
    seed: Option<u64>,
    dt: Option<f64>,
    log: Option<&Path>,
    metrics_out: Option<&Path>,
    disable_guards: bool,
    profile: Option<String>,
) -> Result<ExitCode, ExitCode> {
    let mut spec = parse_scenario(&read(scenario)?).map_err(|e| fail(EXIT_DATA, e))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(d) = dt {
        spec.dt = d;
    }
    if let Some(p) = profile {
        spec.ego.profile = p;
    }
    let sc = resolve_scenario(spec, scenario.parent()).map_err(|e| fail(EXIT_DATA, e))?;
    for w in &sc.warnings {
        eprintln!("warning: {w}");
    }
    let mut log_file = match log {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| fail(EXIT_DATA, format!("{}: {e}", p.display())))?)),
        None => None,
    };
    let out = run(sc, StepOptions { disable_guards }, log_file.as_mut().map(|w| w as &mut dyn Write)).map_err(|e| fail(EXIT_DATA, e))?;
    let text = serde_json::to_string_pretty(&out.metrics).expect("metrics serialize");
    match metrics_out {
        Some(p) => std::fs::write(p, &text).map_err(|e| fail(EXIT_DATA, format!("{}: {e}", p.display())))?,
        None => println!("{text}"),
    }
    Ok(ExitCode::from(out.metrics.exit_code() as u8))
}

fn cmd_validate(map: &Path) -> Result<ExitCode, ExitCode> {
    let m = load_map(&read(map)?).map_err(|e| fail(EXIT_DATA, e))?;
    println!("map OK: {} lanes", m.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_resolve_demo(path: &Path) -> Result<ExitCode, ExitCode> {
    let parsed: TraitFile = serde_json::from_str(&read(path)?).map_err(|e| fail(EXIT_DATA, e))?;
    let (side, raw) = match parsed {
        TraitFile::Bare(t) => (Side::Left, t),
        TraitFile::WithSide { side, traits } => (side, traits),
    };
    let traits = raw
        .into_iter()
        .map(|r| Trait::new(r.lo, r.hi, r.weight, r.source))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| fail(EXIT_DATA, e))?;
    let intervals = build_disjoint_intervals(&traits).map_err(|e| fail(EXIT_DATA, e))?;
    for iv in &intervals {
        println!("[{:.3}, {:.3})  net {:+}", iv.lo, iv.hi, iv.net_weight);
    }
    let c = resolve(&traits, side).map_err(|e| fail(EXIT_DATA, e))?;
    println!("consent: {:.3} m {:?}", c.offset, c.side);
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run {
            scenario,
            seed,
            dt,
            log,
            metrics_out,
            disable_guards,
            profile,
        } => cmd_run(&scenario, seed, dt, log.as_deref(), metrics_out.as_deref(), disable_guards, profile),
        Command::Validate { map } => cmd_validate(&map),
        Command::ResolveDemo { traits } => cmd_resolve_demo(&traits),
    };
    result.unwrap_or_else(|code| code)
}
