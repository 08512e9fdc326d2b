//! Exit codes and the machine-readable error line.

use bci_core::acquisition::AcqError;
use bci_core::dataset::DatasetError;
use bci_core::engine::EngineError;
use bci_core::features::FeatureError;
use bci_core::models::ModelError;
use bci_core::signal::SignalError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Source(String),
    #[error("{0}")]
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Source(_) => 4,
            CliError::Divergence(_) => 5,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Data(_) => "data",
            CliError::Source(_) => "source",
            CliError::Divergence(_) => "divergence",
        }
    }

    /// One JSON object on a single line.
    pub fn json_line(&self) -> String {
        serde_json::json!({
            "error": self.category(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        })
        .to_string()
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<FeatureError> for CliError {
    fn from(e: FeatureError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SignalError> for CliError {
    fn from(e: SignalError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<AcqError> for CliError {
    fn from(e: AcqError) -> Self {
        match e {
            AcqError::InvalidConfig(m) => CliError::Usage(m),
            other => CliError::Source(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::DivergenceDetected => CliError::Divergence(e.to_string()),
            ModelError::InvalidHyperparameter(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::InvalidConfig(m) => CliError::Usage(m),
            EngineError::SourceLost(m) => CliError::Source(m),
            EngineError::Acquisition(a) => a.into(),
            EngineError::Model(m) => m.into(),
            EngineError::Signal(s) => s.into(),
            EngineError::Feature(f) => f.into(),
            EngineError::Dataset(d) => d.into(),
            EngineError::RatingMissing(_) => CliError::Data(e.to_string()),
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_follow_the_error_family() {
        assert_eq!(CliError::from(ModelError::DivergenceDetected).exit_code(), 5);
        assert_eq!(CliError::from(ModelError::TooFewClasses).exit_code(), 3);
        assert_eq!(CliError::from(EngineError::SourceLost("gone".into())).exit_code(), 4);
        assert_eq!(CliError::from(AcqError::InvalidConfig("x".into())).exit_code(), 2);
        let line = CliError::Data("bad file".into()).json_line();
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["error"], "data");
        assert_eq!(v["exit_code"], 3);
        assert!(!line.contains('\n'));
    }
}
