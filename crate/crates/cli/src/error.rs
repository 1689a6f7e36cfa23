use blockfield::constraints::ConstraintError;
use blockfield::eval::EvalError;
use blockfield::export::ExportError;
use blockfield::field::CheckpointError;
use blockfield::guidance::GuidanceError;
use blockfield::palette::PaletteError;
use blockfield::render::RenderError;
use blockfield::train::TrainError;
use thiserror::Error;

/// Failure classes, one per exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Network(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Network(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub fn config(message: impl std::fmt::Display) -> CliError {
    CliError::Config(message.to_string())
}

pub fn runtime(message: impl std::fmt::Display) -> CliError {
    CliError::Runtime(message.to_string())
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Constraint(_) => config(e),
            TrainError::Guidance(g) => g.into(),
            _ => runtime(e),
        }
    }
}

impl From<GuidanceError> for CliError {
    fn from(e: GuidanceError) -> Self {
        match e {
            GuidanceError::Network { .. } | GuidanceError::Protocol(_) => CliError::Network(e.to_string()),
            GuidanceError::Capability(_) | GuidanceError::Views(_) => config(e),
        }
    }
}

impl From<PaletteError> for CliError {
    fn from(e: PaletteError) -> Self {
        config(e)
    }
}

impl From<ConstraintError> for CliError {
    fn from(e: ConstraintError) -> Self {
        config(e)
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        config(format!("checkpoint: {e}"))
    }
}

impl From<RenderError> for CliError {
    fn from(e: RenderError) -> Self {
        runtime(e)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        config(e)
    }
}

impl From<ExportError> for CliError {
    fn from(e: ExportError) -> Self {
        match e {
            ExportError::Io(_) => runtime(e),
            _ => config(e),
        }
    }
}
