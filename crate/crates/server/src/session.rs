//! Session requests and the worker that runs one session.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc};
use std::time::{Duration, SystemTime, UNIX_EPOCH};
use tokio::sync::broadcast;

use bci_core::acquisition::{stream_source, SamplingConfig, SourceKind, StreamOptions, SynthConfig, SynthSource};
use bci_core::dataset::{save_session, Key, KeyAction, KeyEvent, SessionMetrics, SessionRecord};
use bci_core::engine::{
    run_demo, run_training_session, run_validation, ChannelOperator, EngineError, GameState, Paced, Phase,
    SampleSource, ServerMsg, SessionConfig, SessionObserver, SessionPlan, ValidationModel, ValidationRow,
};
use bci_core::models::{Classifier, ModelConfig, ModelKind, TrainConfig};

use crate::{ServerConfig, ServerError};

pub(crate) fn unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionKind {
    /// Keys drive the game; frames are labeled from the keys.
    Training,
    /// The pre-trained model drives the game; keys are only logged.
    Demo,
    /// Keyed recording, model fit, model-controlled play, then a rating.
    Validation,
}

/// Where samples come from. Synthetic and file sources are paced to the
/// sampling rate so the game runs in real time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum SourceRequest {
    Synthetic {
        #[serde(flatten)]
        config: SynthConfig,
    },
    Serial {
        path: PathBuf,
    },
    Tcp {
        addr: String,
    },
    Replay {
        path: PathBuf,
    },
}

impl Default for SourceRequest {
    fn default() -> Self {
        SourceRequest::Synthetic {
            config: SynthConfig::default(),
        }
    }
}

/// Body of `POST /session/start`. Every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StartRequest {
    pub kind: Option<SessionKind>,
    pub plan: SessionPlan,
    /// Validation model; `cnn` transfers from the server's pre-trained model.
    pub model_kind: Option<ModelKind>,
    pub source: SourceRequest,
    pub seed: Option<u64>,
    pub session_id: Option<String>,
    pub subject_id: Option<String>,
    /// Optimizer settings for CNN transfer.
    pub train: Option<TrainConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Running,
    Complete,
    /// Finished without a user rating.
    Incomplete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub kind: SessionKind,
    pub status: SessionStatus,
    pub seed: u64,
    pub started_unix_ms: u64,
    pub plan: SessionPlan,
    pub model_kind: Option<ModelKind>,
    pub metrics: Option<SessionMetrics>,
    pub frames: Option<usize>,
    pub key_count: usize,
    pub validation: Option<ValidationRow>,
    pub file: Option<PathBuf>,
    pub error: Option<String>,
}

/// Summary plus the server-stamped key log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    #[serde(flatten)]
    pub summary: SessionSummary,
    pub key_events: Vec<KeyEvent>,
}

impl SessionInfo {
    pub(crate) fn running(id: &str, req: &StartRequest, seed: u64) -> Self {
        let kind = req.kind.unwrap_or(SessionKind::Training);
        Self {
            summary: SessionSummary {
                session_id: id.to_string(),
                kind,
                status: SessionStatus::Running,
                seed,
                started_unix_ms: unix_ms(),
                plan: req.plan.clone(),
                model_kind: match kind {
                    SessionKind::Validation => Some(req.model_kind.unwrap_or(ModelKind::Knn)),
                    _ => None,
                },
                metrics: None,
                frames: None,
                key_count: 0,
                validation: None,
                file: None,
                error: None,
            },
            key_events: Vec::new(),
        }
    }

    pub(crate) fn finish(&mut self, f: Finished) {
        let s = &mut self.summary;
        s.status = f.status;
        s.error = f.error;
        s.validation = f.validation;
        s.file = f.file;
        if let Some(rec) = f.record {
            s.metrics = Some(rec.metrics);
            s.frames = Some(rec.frames.len());
            s.key_count = rec.key_log.len();
            self.key_events = rec.key_log.events().to_vec();
        }
    }
}

pub(crate) struct Finished {
    status: SessionStatus,
    error: Option<String>,
    record: Option<SessionRecord>,
    validation: Option<ValidationRow>,
    file: Option<PathBuf>,
}

/// Broadcasts engine updates as protocol JSON.
struct Broadcaster {
    tx: broadcast::Sender<String>,
}

impl Broadcaster {
    fn send(&self, msg: ServerMsg) {
        // No subscribers is fine: nobody is watching.
        let _ = self.tx.send(msg.to_json());
    }
}

impl SessionObserver for Broadcaster {
    fn phase(&mut self, phase: Phase, duration_s: f64) {
        self.send(ServerMsg::phase(phase, duration_s));
    }
    fn state(&mut self, state: &GameState, phase: Phase, remaining_s: f64) {
        self.send(ServerMsg::state(state, phase, remaining_s));
    }
    fn quality(&mut self, railed: &[bool]) {
        self.send(ServerMsg::quality(railed.to_vec()));
    }
}

enum Plan {
    Training,
    Demo(Arc<Classifier>),
    Fresh(ModelConfig),
    Transfer(Arc<Classifier>, TrainConfig),
}

/// A validated session ready to run.
pub(crate) struct Job {
    plan: Plan,
    cfg: SessionConfig,
    source: Box<dyn SampleSource>,
}

fn open_source(req: &SourceRequest) -> Result<Box<dyn SampleSource>, ServerError> {
    let sampling = SamplingConfig::default();
    let montage = Default::default();
    let opts = StreamOptions {
        paced: true,
        ..Default::default()
    };
    let bad = |e: bci_core::acquisition::AcqError| ServerError::BadRequest(e.to_string());
    Ok(match req {
        SourceRequest::Synthetic { config } => {
            Box::new(Paced::new(SynthSource::new(&sampling, &montage, config).map_err(bad)?))
        }
        SourceRequest::Serial { path } => {
            Box::new(stream_source(SourceKind::Serial(path.clone()), &sampling, &opts).map_err(bad)?)
        }
        SourceRequest::Tcp { addr } => Box::new(stream_source(SourceKind::Tcp(addr.clone()), &sampling, &opts).map_err(bad)?),
        SourceRequest::Replay { path } => {
            Box::new(stream_source(SourceKind::FileReplay(path.clone()), &sampling, &opts).map_err(bad)?)
        }
    })
}

impl Job {
    pub(crate) fn prepare(req: &StartRequest, id: &str, server: &ServerConfig) -> Result<Self, ServerError> {
        req.plan.validate().map_err(|e| ServerError::BadRequest(e.to_string()))?;
        let pretrained = || {
            server
                .model
                .clone()
                .ok_or_else(|| ServerError::BadRequest("server was started without a pre-trained model".into()))
        };
        let plan = match req.kind.unwrap_or(SessionKind::Training) {
            SessionKind::Training => Plan::Training,
            SessionKind::Demo => Plan::Demo(pretrained()?),
            SessionKind::Validation => match req.model_kind.unwrap_or(ModelKind::Knn) {
                ModelKind::Cnn => {
                    let base = pretrained()?;
                    if base.kind() != ModelKind::Cnn {
                        return Err(ServerError::BadRequest("pre-trained model is not a CNN".into()));
                    }
                    Plan::Transfer(base, req.train.clone().unwrap_or_default())
                }
                kind => Plan::Fresh(ModelConfig::new(kind)),
            },
        };
        let seed = req.seed.unwrap_or_else(bci_core::entropy_seed);
        let cfg = SessionConfig {
            session_id: id.to_string(),
            subject_id: req.subject_id.clone().unwrap_or_else(|| "subject".into()),
            seed,
            plan: req.plan.clone(),
            ..Default::default()
        };
        Ok(Self {
            plan,
            cfg,
            source: open_source(&req.source)?,
        })
    }

    pub(crate) fn seed(&self) -> u64 {
        self.cfg.seed
    }

    pub(crate) fn run(
        mut self,
        keys: mpsc::Receiver<(Key, KeyAction)>,
        rating: mpsc::Receiver<u8>,
        events: broadcast::Sender<String>,
        out_dir: Option<&Path>,
    ) -> Finished {
        let mut op = ChannelOperator::new(keys);
        let mut obs = Broadcaster { tx: events };
        let source = self.source.as_mut();
        let timeout = Duration::from_secs_f64(self.cfg.plan.rating_timeout_s.max(0.0));
        let result: Result<(SessionRecord, Option<ValidationRow>, bool), EngineError> = match &self.plan {
            Plan::Training => run_training_session(&self.cfg, source, &mut op, &mut obs).map(|(r, _)| (r, None, true)),
            Plan::Demo(model) => run_demo(model, &self.cfg, source, &mut op, &mut obs).map(|d| (d.record, None, true)),
            Plan::Fresh(_) | Plan::Transfer(..) => {
                let which = match &self.plan {
                    Plan::Fresh(m) => ValidationModel::Fresh(m),
                    Plan::Transfer(base, train) => ValidationModel::Transfer(base, train),
                    _ => unreachable!(),
                };
                let mut ask = || rating.recv_timeout(timeout).ok();
                match run_validation(which, &self.cfg, source, &mut op, &mut obs, &mut ask) {
                    Ok(out) => Ok((out.record, Some(out.row), true)),
                    Err(EngineError::RatingMissing(out)) => Ok((out.record, Some(out.row), false)),
                    Err(e) => Err(e),
                }
            }
        };
        match result {
            Ok((record, validation, complete)) => {
                let file = out_dir.and_then(|dir| {
                    let path = dir.join(format!("{}.bcis", record.header.session_id));
                    match save_session(&record, &path) {
                        Ok(()) => Some(path),
                        Err(e) => {
                            log::error!("cannot save {}: {e}", path.display());
                            None
                        }
                    }
                });
                Finished {
                    status: if complete {
                        SessionStatus::Complete
                    } else {
                        SessionStatus::Incomplete
                    },
                    error: None,
                    record: Some(record),
                    validation,
                    file,
                }
            }
            Err(e) => Finished {
                status: SessionStatus::Failed,
                error: Some(e.to_string()),
                record: None,
                validation: None,
                file: None,
            },
        }
    }
}
