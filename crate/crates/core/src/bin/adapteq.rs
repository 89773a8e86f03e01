use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use adapteq::harness::{parse_seeds, run_experiment, write_outcome, Experiment, ExperimentConfig};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ExperimentArg {
    PowerSweep,
    Convergence,
    Adaptivity,
    WordlengthSweep,
    Gradcheck,
}

impl From<ExperimentArg> for Experiment {
    fn from(e: ExperimentArg) -> Self {
        match e {
            ExperimentArg::PowerSweep => Experiment::PowerSweep,
            ExperimentArg::Convergence => Experiment::Convergence,
            ExperimentArg::Adaptivity => Experiment::Adaptivity,
            ExperimentArg::WordlengthSweep => Experiment::WordlengthSweep,
            ExperimentArg::Gradcheck => Experiment::Gradcheck,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Reference,
    Quantized,
}

/// Run an equalizer experiment and write its CSV results.
///
/// Exit status: 0 when every acceptance check passes, 2 when one fails,
/// 1 on errors.
#[derive(Debug, Parser)]
#[command(name = "adapteq", version)]
struct Cli {
    #[arg(value_enum)]
    experiment: ExperimentArg,
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated seeds, replacing the configured list.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Taylor order of the Kerr backward step; 0 uses exact cos/sin.
    #[arg(long)]
    taylor_order: Option<u32>,
}

fn run(cli: &Cli) -> adapteq::Result<bool> {
    let mut cfg = ExperimentConfig::from_file(&cli.config, cli.experiment.into())?;
    if let Some(s) = &cli.seeds {
        cfg.seeds = parse_seeds(s)?;
    }
    if let Some(m) = cli.mode {
        cfg.override_mode(matches!(m, ModeArg::Quantized));
    }
    if let Some(order) = cli.taylor_order {
        cfg.override_taylor_order(order)?;
    }
    cfg.validate()?;

    let outcome = run_experiment(&cfg)?;
    let files = write_outcome(&cli.out, &cfg, &outcome)?;
    println!("{} (config {})", cfg.experiment.name(), &cfg.hash()[..12]);
    for c in &outcome.checks {
        let tag = if c.acceptance { "" } else { " (info)" };
        let verdict = if c.passed { "PASS" } else { "FAIL" };
        println!("{verdict} {}{tag}: {}", c.name, c.detail);
    }
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(outcome.acceptance_passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("adapteq: {e}");
            ExitCode::from(1)
        }
    }
}
