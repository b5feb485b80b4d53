use scenelayers::datastore::DatastoreError;
use scenelayers::gateway::GatewayError;
use scenelayers::harness::HarnessError;
use scenelayers::pipeline::PipelineError;
use scenelayers::prompt::PromptError;
use scenelayers::promptopt::OptimizeError;
use scenelayers_curation::ServiceError;
use thiserror::Error;

/// Failure of a command, grouped by who has to act on it.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config or names. Exit 2.
    #[error("{0}")]
    Usage(String),
    /// Unreadable or inconsistent inputs (manifest, labels, prompt assets). Exit 3.
    #[error("{0}")]
    Data(String),
    /// The model backend failed. Exit 4.
    #[error("{0}")]
    Backend(String),
    /// Outputs could not be written, or the service could not bind. Exit 5.
    #[error("{0}")]
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Backend(_) => 4,
            CliError::Output(_) => 5,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Data(_) => "data",
            CliError::Backend(_) => "backend",
            CliError::Output(_) => "output",
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::UnknownModel(_) | GatewayError::InvalidSpec { .. } => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Backend(e.to_string()),
        }
    }
}

impl From<DatastoreError> for CliError {
    fn from(e: DatastoreError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match &e {
            PipelineError::Layer { source, .. } | PipelineError::Gateway { source, .. } => {
                match source {
                    GatewayError::UnknownModel(_) | GatewayError::InvalidSpec { .. } => {
                        CliError::Usage(e.to_string())
                    }
                    _ => CliError::Backend(e.to_string()),
                }
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Gateway(g) => g.into(),
            HarnessError::EmptySweep => CliError::Usage(e.to_string()),
            HarnessError::Io { .. } => CliError::Output(e.to_string()),
            HarnessError::MissingGold(_) | HarnessError::Format { .. } => {
                CliError::Data(e.to_string())
            }
        }
    }
}

impl From<OptimizeError> for CliError {
    fn from(e: OptimizeError) -> Self {
        match e {
            OptimizeError::Harness(h) => h.into(),
            OptimizeError::Prompt(p) => p.into(),
            OptimizeError::Io { .. } => CliError::Output(e.to_string()),
            OptimizeError::ZeroBudget | OptimizeError::EmptySplit => CliError::Usage(e.to_string()),
        }
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Config(_) => CliError::Usage(e.to_string()),
            ServiceError::Store(s) => s.into(),
            ServiceError::Bind { .. } | ServiceError::Server(_) => CliError::Output(e.to_string()),
        }
    }
}
