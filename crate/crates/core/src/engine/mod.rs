//! Live session engine: streaming pipeline, game simulation, operators,
//! and the training / demo / validation session runners.

mod game;
mod pipeline;
pub mod protocol;
mod session;

pub use game::{game_step, Command, CommandSource, GameConfig, GameState};
pub use pipeline::Pipeline;
pub use protocol::{ClientMsg, ProtocolError, ServerMsg, PROTOCOL_VERSION};
pub use session::{
    command_from_prediction, run_demo, run_training_session, run_validation, ChannelOperator, CommandEntry,
    CommandSmoother, DemoOutcome, Driver, IntentFollower, NullObserver, Operator, Paced, Phase, PhaseStats,
    SampleSource, ScriptedKeys, SessionConfig, SessionObserver, SessionPlan, SessionRunner, ValidationModel,
    ValidationOutcome, ValidationRow,
};

use crate::acquisition::AcqError;
use crate::dataset::DatasetError;
use crate::features::FeatureError;
use crate::models::ModelError;
use crate::signal::SignalError;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("signal source lost: {0}")]
    SourceLost(String),
    /// The session finished but no user rating was given; the outcome is
    /// kept so the caller can still store it as incomplete.
    #[error("session finished without a user rating")]
    RatingMissing(Box<ValidationOutcome>),
    #[error(transparent)]
    Acquisition(#[from] AcqError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}
