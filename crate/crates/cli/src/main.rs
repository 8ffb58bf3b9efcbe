mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ionprep::budget::BudgetInputs;
use ionprep::config::RunConfig;

use commands::Run;
use output::Manifest;

#[derive(Parser)]
#[command(name = "ionprep", version, about = "Rate-model simulation of hyperfine state preparation in trapped ions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML); the built-in 43Ca+ configuration by default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory with <species>.toml files overriding the built-in data.
    #[arg(long, global = true, env = "IONPREP_SPECIES_DIR")]
    species_dir: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Initial state "F,M" or "uniform".
    #[arg(long, global = true)]
    initial: Option<String>,
    /// Static field in mT.
    #[arg(long, global = true)]
    field: Option<f64>,
    /// Worker threads for sweeps.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Exit 0 even when points fail or do not converge.
    #[arg(long, global = true)]
    allow_partial: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Dressed-state energies of every level.
    Levels {
        #[arg(long)]
        species: Option<String>,
    },
    /// Pulsed frequency-selective state preparation.
    Fssp,
    /// Polarisation-selective state preparation.
    Pssp {
        /// Fraction of the wrong circular polarisation.
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Multi-tone scheme at low and high field.
    Alt,
    /// FSSP error and duration against pump intensity.
    Sweep {
        /// Comma-separated intensities (saturation units); empty for none.
        #[arg(long)]
        grid: Option<String>,
    },
    /// FSSP error for each species of the configured scan.
    SpeciesScan,
    /// Error budget of the readout and transfer pulses.
    Budget {
        /// Budget inputs (TOML); the bundled 43Ca+ inputs by default.
        #[arg(long)]
        inputs: Option<PathBuf>,
    },
    /// Re-run the run recorded in --out and compare every output file.
    Check,
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: String) -> Self {
        CliError { code: 2, message }
    }
}

impl From<ionprep::Error> for CliError {
    fn from(e: ionprep::Error) -> Self {
        use ionprep::Error::*;
        let code = match e {
            Config(_) | UnknownState(_) => 2,
            Structure(_) | LambdaGuard(_) | Numerical(_) => 3,
            NonConvergence { .. } => 4,
        };
        CliError { code, message: e.to_string() }
    }
}

fn parse_grid(text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| CliError::config(format!("bad grid value '{s}'"))))
        .collect()
}

fn build_run(cli: &Cli) -> Result<Run, CliError> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default_ca43(),
    };
    if let Some(init) = &cli.initial {
        config.initial = init.clone();
    }
    if let Some(b) = cli.field {
        config.field_mt = Some(b);
    }
    let mut budget = None;
    let command = match &cli.command {
        Command::Levels { species } => {
            if let Some(s) = species {
                if *s != config.species {
                    let field = config.field_mt;
                    config = RunConfig::for_species(s);
                    config.field_mt = field;
                }
            }
            "levels"
        }
        Command::Fssp => "fssp",
        Command::Pssp { epsilon } => {
            if let Some(e) = epsilon {
                config.pssp.epsilon = *e;
            }
            "pssp"
        }
        Command::Alt => "alt",
        Command::Sweep { grid } => {
            if let Some(g) = grid {
                config.sweep.intensities = parse_grid(g)?;
            }
            "sweep"
        }
        Command::SpeciesScan => "species-scan",
        Command::Budget { inputs } => {
            budget = Some(match inputs {
                Some(p) => BudgetInputs::from_file(p)?,
                None => BudgetInputs::default_ca43(),
            });
            "budget"
        }
        Command::Check => "check",
    };
    config.validate()?;
    Ok(Run {
        command: command.into(),
        config,
        budget,
        species_dir: cli.species_dir.clone(),
        allow_partial: cli.allow_partial,
    })
}

/// Replays the manifest in `cli.out` into a scratch directory and compares
/// file hashes.
fn check(cli: &Cli) -> Result<(), CliError> {
    let recorded = Manifest::read(&cli.out)?;
    let budget = recorded.budget_inputs.as_deref().map(BudgetInputs::from_toml_str).transpose()?;
    let run = Run {
        command: recorded.command.clone(),
        config: RunConfig::from_toml_str(&recorded.config)?,
        budget,
        species_dir: cli.species_dir.clone().or(recorded.species_dir.clone()),
        allow_partial: recorded.allow_partial,
    };
    if run.hash() != recorded.config_sha256 {
        return Err(CliError { code: 1, message: "recorded config does not match its hash".into() });
    }
    let scratch = std::env::temp_dir().join(format!("ionprep-check-{}", std::process::id()));
    let replay = run.execute(&scratch);
    let _ = std::fs::remove_dir_all(&scratch);
    let (manifest, _) = replay?;
    let mut bad = Vec::new();
    for (name, hash) in &recorded.files {
        let on_disk = std::fs::read(cli.out.join(name)).map(|b| output::sha256_hex(&b)).unwrap_or_default();
        if &on_disk != hash {
            bad.push(format!("{name}: modified since the run"));
        }
        if manifest.files.get(name) != Some(hash) {
            bad.push(format!("{name}: not reproduced"));
        }
    }
    if recorded.version != output::VERSION {
        eprintln!("note: recorded with version {}, checking with {}", recorded.version, output::VERSION);
    }
    if !bad.is_empty() {
        return Err(CliError { code: 1, message: bad.join("\n") });
    }
    println!("{} files reproduced ({})", recorded.files.len(), recorded.command);
    Ok(())
}

fn real_main(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::config(format!("--jobs: {e}")))?;
    }
    if matches!(cli.command, Command::Check) {
        return check(cli);
    }
    let run = build_run(cli)?;
    let (manifest, outcome) = run.execute(&cli.out)?;
    for name in manifest.files.keys() {
        println!("{}", cli.out.join(name).display());
    }
    outcome.status(run.allow_partial)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match real_main(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
