mod commands;
mod config;
mod report;
mod verify;

use std::fmt;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{CommandKind, Flags, RunConfig};

pub const VERSION: &str = env!("WDEFICIT_VERSION");

#[derive(Parser)]
#[command(name = "wdeficit", version = VERSION, about = "Work deficit, one-way deficit and global discord of few-body states and MPS")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimizer-backed value of a dense state.
    Exact(Flags),
    /// Segment bounds L_l and U_l of a dense state or finite chain.
    Bounds(Flags),
    /// Thermodynamic-limit bounds of a translation-invariant MPS.
    Tdl(Flags),
    /// Coarse-grained bounds with m-site blocks.
    Coarse(Flags),
    /// CSV sweep of the family bounds over g.
    Sweep(Flags),
    /// Run an invariant suite and report margins.
    Verify(Flags),
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(wdeficit::Error),
    Verification(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(wdeficit::Error::Resource(_)) => 3,
            CliError::Core(
                wdeficit::Error::Argument(_)
                | wdeficit::Error::Parse(_)
                | wdeficit::Error::Domain(_)
                | wdeficit::Error::NotNormal(_)
                | wdeficit::Error::Io(_),
            ) => 2,
            CliError::Core(wdeficit::Error::Optimizer(_)) => 1,
            CliError::Verification(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Verification(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl From<wdeficit::Error> for CliError {
    fn from(e: wdeficit::Error) -> Self {
        CliError::Core(e)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (kind, flags) = match cli.command {
        Command::Exact(f) => (CommandKind::Exact, f),
        Command::Bounds(f) => (CommandKind::Bounds, f),
        Command::Tdl(f) => (CommandKind::Tdl, f),
        Command::Coarse(f) => (CommandKind::Coarse, f),
        Command::Sweep(f) => (CommandKind::Sweep, f),
        Command::Verify(f) => (CommandKind::Verify, f),
    };
    let cfg = RunConfig::resolve(kind, &flags)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {} worker threads: {e}", cfg.threads)))?;
    pool.install(|| match kind {
        CommandKind::Exact => commands::exact(&cfg),
        CommandKind::Bounds => commands::bounds(&cfg),
        CommandKind::Tdl => commands::tdl(&cfg),
        CommandKind::Coarse => commands::coarse(&cfg),
        CommandKind::Sweep => commands::sweep(&cfg),
        CommandKind::Verify => verify::run(&cfg),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("wdeficit: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
