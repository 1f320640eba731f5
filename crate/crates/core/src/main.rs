use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use wmqkd::scenario::{self, Mode, RunConfig, Scenario};
use wmqkd::{Calibration, Error};

#[derive(Parser)]
#[command(name = "wmqkd", version, about = "Wavelength-multiplexed entanglement QKD simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Key rate vs loss: Ch.1, Ch.1+2 multiplexed, Ch.1+2 merged.
    Fig3b(RunArgs),
    /// n-channel scaling and broad-channel projections (analytic).
    Fig3d(RunArgs),
    /// Arbitrary sweep with Monte Carlo and analytic columns.
    Custom(RunArgs),
    /// Refit the calibration and print the `[fitted]` table.
    Calibrate,
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML run configuration; keys not given keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Montecarlo,
    Analytic,
    Both,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Montecarlo => Mode::Montecarlo,
            ModeArg::Analytic => Mode::Analytic,
            ModeArg::Both => Mode::Both,
        }
    }
}

fn error_record(kind: &str, field: Option<&str>, message: &str) -> ExitCode {
    let rec = json!({ "status": "error", "kind": kind, "field": field, "message": message });
    eprintln!("{rec}");
    ExitCode::from(2)
}

fn run(scenario: Scenario, args: RunArgs) -> Result<scenario::RunOutput, Error> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(scenario, path)?,
        None => RunConfig::defaults(scenario),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = args.mode {
        cfg.mode = mode.into();
    }
    cfg.validate()?;
    scenario::run(&cfg, &args.out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return error_record("usage", None, e.to_string().trim()),
    };
    let (scenario, args) = match cli.command {
        Command::Fig3b(a) => (Scenario::Fig3b, a),
        Command::Fig3d(a) => (Scenario::Fig3d, a),
        Command::Custom(a) => (Scenario::Custom, a),
        Command::Calibrate => {
            return match Calibration::frozen().fit() {
                Ok(f) => {
                    print!("[fitted]\n{}", toml::to_string(&f).expect("fitted values serialise"));
                    ExitCode::SUCCESS
                }
                Err(e) => error_record(e.kind(), e.field(), &e.to_string()),
            };
        }
    };
    match run(scenario, args) {
        Ok(out) => {
            println!("{}", json!({ "status": "ok", "files": out.files, "warnings": out.warnings }));
            ExitCode::SUCCESS
        }
        Err(e) => error_record(e.kind(), e.field(), &e.to_string()),
    }
}
