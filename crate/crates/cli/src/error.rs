use efem::engine::EngineError;
use efem::geometry::ply::PlyError;
use efem::prior::PriorError;
use efem::scenegen::SceneError;
use efem::training::TrainingError;

pub const USER: u8 = 2;
pub const NUMERIC: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn user(message: impl Into<String>) -> Self {
        Self {
            code: USER,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self {
            code: NUMERIC,
            message: message.into(),
        }
    }

    pub fn context(self, what: impl std::fmt::Display) -> Self {
        Self {
            message: format!("{what}: {}", self.message),
            ..self
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::user(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::user(e.to_string())
    }
}

impl From<TrainingError> for CliError {
    fn from(e: TrainingError) -> Self {
        match e {
            TrainingError::Config(_) => Self::user(e.to_string()),
            _ => Self::numeric(e.to_string()),
        }
    }
}

impl From<PriorError> for CliError {
    fn from(e: PriorError) -> Self {
        match e {
            PriorError::Io(_) | PriorError::Format(_) | PriorError::VecNet(_) => Self::user(e.to_string()),
            _ => Self::numeric(e.to_string()),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(_) => Self::user(e.to_string()),
            _ => Self::numeric(e.to_string()),
        }
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        match e {
            SceneError::Shape(TrainingError::Sampling(_)) => Self::numeric(e.to_string()),
            _ => Self::user(e.to_string()),
        }
    }
}

impl From<PlyError> for CliError {
    fn from(e: PlyError) -> Self {
        Self::user(e.to_string())
    }
}
