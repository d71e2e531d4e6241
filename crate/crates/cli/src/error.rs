use hierpop_core::{DynamicsError, StabilityError, SteadyError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{origin}:{line}:{column}: field `{field}`: {message}")]
    Parse {
        origin: String,
        line: usize,
        column: usize,
        field: String,
        message: String,
    },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("assumption violations (strict mode):\n{0}")]
    Assumption(String),
    #[error("{command}: {message}")]
    NoConvergence {
        command: &'static str,
        message: String,
    },
    #[error("{command}: {message}")]
    Numerical {
        command: &'static str,
        message: String,
    },
}

impl CliError {
    /// 0 success, 1 usage or parse, 2 non-convergence, 3 strict assumption failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Io { .. } | Self::Parse { .. } | Self::Invalid(_) | Self::Numerical { .. } => 1,
            Self::NoConvergence { .. } => 2,
            Self::Assumption(_) => 3,
        }
    }

    pub fn steady(err: SteadyError) -> Self {
        match err {
            SteadyError::Diverged { .. } | SteadyError::CollapsedToZero { .. } => {
                Self::NoConvergence {
                    command: "steady",
                    message: err.to_string(),
                }
            }
            other => Self::Numerical {
                command: "steady",
                message: other.to_string(),
            },
        }
    }

    pub fn dynamics(err: DynamicsError) -> Self {
        match err {
            DynamicsError::BlowUp { .. } => Self::NoConvergence {
                command: "simulate",
                message: err.to_string(),
            },
            other => Self::Numerical {
                command: "simulate",
                message: other.to_string(),
            },
        }
    }

    pub fn stability(command: &'static str, err: StabilityError) -> Self {
        match err {
            StabilityError::NoConvergence(_) => Self::NoConvergence {
                command,
                message: err.to_string(),
            },
            StabilityError::Steady(inner) => match Self::steady(inner) {
                Self::NoConvergence { message, .. } => Self::NoConvergence { command, message },
                Self::Numerical { message, .. } => Self::Numerical { command, message },
                other => other,
            },
            other => Self::Numerical {
                command,
                message: other.to_string(),
            },
        }
    }
}
