//! Command-line front end: argument parsing, run configuration and the
//! `synth`, `preprocess`, `train`, `eval` and `compare` commands.

pub mod args;
pub mod commands;
pub mod config;

pub use args::{Cli, Command};
pub use config::RunConfig;

/// Exit status for invalid configuration or input.
pub const EXIT_CONFIG: u8 = 2;
/// Exit status when training produced a non-finite loss.
pub const EXIT_DIVERGED: u8 = 3;
/// Exit status for an unreadable or corrupted checkpoint.
pub const EXIT_CHECKPOINT: u8 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] icegan::Error),
}

impl CliError {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        use icegan::Error as E;
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io { .. } => 1,
            CliError::Core(e) => match e {
                E::Config(_)
                | E::Usage(_)
                | E::Input(_)
                | E::Insufficient(_)
                | E::Ingest(_)
                | E::Shape { .. } => EXIT_CONFIG,
                E::Diverged(_) => EXIT_DIVERGED,
                E::Checksum { .. } | E::Format(_) => EXIT_CHECKPOINT,
                E::Io(_) | E::Csv(_) => 1,
            },
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Synth(a) => commands::synth(a, &cfg, cli.seed),
        Command::Preprocess(a) => commands::preprocess(a, &cfg, cli.seed),
        Command::Train(a) => commands::train(a, &cfg, cli.seed),
        Command::Eval(a) => commands::eval(a, &cfg, cli.seed),
        Command::Compare(a) => commands::compare(a, &cfg, cli.seed),
    }
}
