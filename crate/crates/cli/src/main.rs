use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tris_isac::scenario::{run_and_write, Experiment, Scenario, ScenarioError};

/// Precoder design and sensing experiments for a transmissive-surface ISAC transmitter.
#[derive(Parser)]
#[command(name = "tris-isac", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Objective and rank gaps per alternating iteration for each array size.
    Convergence(Common),
    /// Detection probability against the rate threshold.
    Detection(Common),
    /// Localization bounds against the rate threshold, with and without the common stream.
    CrbSweep(Common),
    /// Joint design and tracking over successive rounds with Monte Carlo range error.
    Tracking(Common),
    /// Common-stream beampattern cuts and half-power widths.
    Beampattern(Common),
    /// Capon angle spectrum and Doppler FFT on synthetic echoes.
    Estimation(Common),
    /// Every experiment in sequence.
    All(Common),
    /// Parse and validate a scenario, then print it with defaults filled in.
    Check {
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Scenario TOML; defaults are used when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Output directory for CSV and manifest files.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Element count of a square array; overrides the array and size sweep.
    #[arg(long)]
    elements: Option<usize>,
}

fn load(path: Option<&PathBuf>) -> Result<Scenario, ScenarioError> {
    match path {
        Some(p) => Scenario::load(p).map_err(|e| match e {
            ScenarioError::Config {
                line: Some(l),
                message,
            } => ScenarioError::Config {
                line: None,
                message: format!("{}:{l}: {message}", p.display()),
            },
            other => other,
        }),
        None => Ok(Scenario::default()),
    }
}

fn prepare(args: &Common) -> Result<Scenario, ScenarioError> {
    let mut sc = load(args.scenario.as_ref())?;
    if let Some(seed) = args.seed {
        sc.seed = seed;
    }
    if let Some(n) = args.elements {
        let side = (n as f64).sqrt().round() as usize;
        if side == 0 || side * side != n {
            return Err(ScenarioError::Config {
                line: None,
                message: format!("--elements must be a positive perfect square, got {n}"),
            });
        }
        sc.array.rows = side;
        sc.array.cols = side;
        sc.sweep.sides = vec![side];
    }
    sc.validate()?;
    Ok(sc)
}

fn run(cli: Cli) -> Result<(), ScenarioError> {
    let (experiments, args): (Vec<Experiment>, Common) = match cli.command {
        Command::Check { scenario } => {
            let sc = load(scenario.as_ref())?;
            print!("{}", sc.to_toml());
            return Ok(());
        }
        Command::Convergence(a) => (vec![Experiment::Convergence], a),
        Command::Detection(a) => (vec![Experiment::Detection], a),
        Command::CrbSweep(a) => (vec![Experiment::CrbSweep], a),
        Command::Tracking(a) => (vec![Experiment::Tracking], a),
        Command::Beampattern(a) => (vec![Experiment::Beampattern], a),
        Command::Estimation(a) => (vec![Experiment::Estimation], a),
        Command::All(a) => (Experiment::ALL.to_vec(), a),
    };
    let sc = prepare(&args)?;
    for exp in experiments {
        let m = run_and_write(exp, &sc, &args.out)?;
        println!(
            "{}: {} rows -> {}",
            m.experiment,
            m.rows,
            args.out.join(format!("{}.csv", m.experiment)).display()
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
