use std::fmt;
use std::path::PathBuf;

#[derive(Debug)]
pub enum CliError {
    /// Every problem found in the configuration.
    Config(Vec<String>),
    /// A stage's input artifact is missing or belongs to another config.
    StageDependency { path: PathBuf, reason: String },
    Runtime(cefi::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::StageDependency { .. } => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(problems) => {
                writeln!(f, "invalid configuration ({} problem(s)):", problems.len())?;
                for p in problems {
                    writeln!(f, "  - {p}")?;
                }
                Ok(())
            }
            CliError::StageDependency { path, reason } => {
                write!(f, "unusable stage input: {} ({reason})", path.display())
            }
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<cefi::Error> for CliError {
    fn from(e: cefi::Error) -> Self {
        match e {
            cefi::Error::ConfigMismatch { path, expected, found } => CliError::StageDependency {
                path,
                reason: format!("written by config {found:016x}, this run is {expected:016x}"),
            },
            other => CliError::Runtime(other),
        }
    }
}
