use std::process::ExitCode;

/// Exit codes: 1 I/O, 2 configuration or input data, 3 divergence,
/// 4 gradient check failure.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] dcseg::Error),

    #[error("invalid configuration: {field}: {message}")]
    Config { field: String, message: String },

    #[error("could not parse configuration: {0}")]
    Parse(String),

    #[error("gradient check failed for: {0}")]
    GradcheckFailed(String),
}

impl CliError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Prefixes field-level configuration errors with their section.
    pub fn in_section(section: &str, e: dcseg::Error) -> Self {
        match e {
            dcseg::Error::Config { field, message } => CliError::Config {
                field: format!("{section}.{field}"),
                message,
            },
            other => CliError::Core(other),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(dcseg::Error::Io { .. } | dcseg::Error::Nifti { .. }) => 1,
            CliError::Core(dcseg::Error::NonFinite { .. }) => 3,
            CliError::GradcheckFailed(_) => 4,
            _ => 2,
        }
    }
}

impl From<&CliError> for ExitCode {
    fn from(e: &CliError) -> Self {
        ExitCode::from(e.exit_code())
    }
}
