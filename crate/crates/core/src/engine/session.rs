//! Session orchestration on a sample-driven clock.
//!
//! Every acquired sample advances session time by one sample period. Game
//! ticks fire whenever session time passes a tick boundary; before each
//! tick the [`Operator`] may press or release keys, stamped with the tick
//! time. The feature pipeline consumes every sample and, depending on the
//! phase, either records key-labeled frames or turns model predictions into
//! game commands through a latest-value mailbox.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::sync::mpsc::Receiver;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use super::{game_step, Command, EngineError, GameConfig, GameState, Pipeline};
use crate::acquisition::{
    AcqError, LabelSchedule, MontageConfig, RawSample, SamplingConfig, StreamHandle, SynthConfig, SynthSource,
    FULL_SCALE_UV,
};
use crate::dataset::{
    balance, label_at, ClassLabel, Key, KeyAction, KeyEvent, KeyLog, LabeledExample, SessionHeader, SessionMetrics,
    SessionRecord, NORMALIZATION_NOTE, TRANSIENT_SECS,
};
use crate::features::{FeatureVector, WindowConfig};
use crate::models::{train_classifier, transfer_classifier, Classifier, ModelConfig, ModelError, ModelKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Training,
    Demo,
    Record,
    Control,
    /// Play has ended and the participant's responsiveness rating is awaited.
    Rating,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Training => "training",
            Phase::Demo => "demo",
            Phase::Record => "record",
            Phase::Control => "control",
            Phase::Rating => "rating",
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Phase durations in seconds and prediction smoothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionPlan {
    pub training_s: f64,
    pub demo_s: f64,
    pub record_s: f64,
    pub control_s: f64,
    /// Majority window over recent predictions; 0 or 1 uses raw argmax.
    pub smoothing: usize,
    /// How long a validation session waits for the user rating.
    pub rating_timeout_s: f64,
}

impl Default for SessionPlan {
    fn default() -> Self {
        Self {
            training_s: 300.0,
            demo_s: 60.0,
            record_s: 30.0,
            control_s: 30.0,
            smoothing: 3,
            rating_timeout_s: 120.0,
        }
    }
}

impl SessionPlan {
    pub fn validate(&self) -> Result<(), EngineError> {
        for (name, v) in [
            ("training", self.training_s),
            ("demo", self.demo_s),
            ("record", self.record_s),
            ("control", self.control_s),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(EngineError::InvalidConfig(format!("{name} duration must be positive")));
            }
        }
        Ok(())
    }

    pub fn duration(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Training => self.training_s,
            Phase::Demo => self.demo_s,
            Phase::Record => self.record_s,
            Phase::Control => self.control_s,
            Phase::Rating => self.rating_timeout_s,
        }
    }
}

/// Everything needed to run and describe one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub session_id: String,
    pub subject_id: String,
    /// Seeds box spawns and dataset balancing.
    pub seed: u64,
    pub plan: SessionPlan,
    pub game: GameConfig,
    pub window: WindowConfig,
    pub montage: MontageConfig,
    /// Seconds between channel-quality reports.
    pub quality_interval_s: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            session_id: "session".into(),
            subject_id: "subject".into(),
            seed: 0,
            plan: SessionPlan::default(),
            game: GameConfig::default(),
            window: WindowConfig::default(),
            montage: MontageConfig::default(),
            quality_interval_s: 1.0,
        }
    }
}

/// Where samples come from. `intent` is the operator's current key class;
/// synthetic sources render it into the signal, devices ignore it.
pub trait SampleSource: Send {
    fn sampling(&self) -> &SamplingConfig;
    fn next_sample(&mut self, intent: ClassLabel) -> Result<Option<RawSample>, AcqError>;
    /// Samples keep arriving while the session is busy elsewhere.
    fn is_realtime(&self) -> bool {
        false
    }
    fn synth_config(&self) -> Option<SynthConfig> {
        None
    }
}

impl SampleSource for SynthSource {
    fn sampling(&self) -> &SamplingConfig {
        SynthSource::sampling(self)
    }
    fn next_sample(&mut self, intent: ClassLabel) -> Result<Option<RawSample>, AcqError> {
        Ok(Some(SynthSource::next_sample(self, intent)))
    }
    fn synth_config(&self) -> Option<SynthConfig> {
        Some(self.config().clone())
    }
}

impl SampleSource for StreamHandle {
    fn sampling(&self) -> &SamplingConfig {
        StreamHandle::sampling(self)
    }
    fn next_sample(&mut self, _intent: ClassLabel) -> Result<Option<RawSample>, AcqError> {
        self.recv()
    }
    fn is_realtime(&self) -> bool {
        StreamHandle::is_realtime(self)
    }
}

/// Releases samples no faster than the sampling rate of wall-clock time.
pub struct Paced<S> {
    inner: S,
    start: Option<Instant>,
    count: u64,
}

impl<S: SampleSource> Paced<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            start: None,
            count: 0,
        }
    }
}

impl<S: SampleSource> SampleSource for Paced<S> {
    fn sampling(&self) -> &SamplingConfig {
        self.inner.sampling()
    }
    fn next_sample(&mut self, intent: ClassLabel) -> Result<Option<RawSample>, AcqError> {
        let start = *self.start.get_or_insert_with(Instant::now);
        let due = start + std::time::Duration::from_secs_f64(self.count as f64 * self.inner.sampling().dt());
        if let Some(wait) = due.checked_duration_since(Instant::now()) {
            std::thread::sleep(wait);
        }
        self.count += 1;
        self.inner.next_sample(intent)
    }
    fn is_realtime(&self) -> bool {
        true
    }
    fn synth_config(&self) -> Option<SynthConfig> {
        self.inner.synth_config()
    }
}

/// The participant: decides key presses from the visible game state.
pub trait Operator: Send {
    fn poll(&mut self, t: f64, state: &GameState, game: &GameConfig) -> Vec<(Key, KeyAction)>;
}

/// Tracks which keys an operator holds and emits only the transitions
/// needed to reach a wanted class.
#[derive(Debug, Clone, Copy, Default)]
struct Held {
    left: bool,
    right: bool,
}

impl Held {
    fn goto(&mut self, want: ClassLabel) -> Vec<(Key, KeyAction)> {
        let mut out = Vec::new();
        for (key, held, wanted) in [
            (Key::Left, &mut self.left, want.includes_left()),
            (Key::Right, &mut self.right, want.includes_right()),
        ] {
            if *held != wanted {
                out.push((key, if wanted { KeyAction::Down } else { KeyAction::Up }));
                *held = wanted;
            }
        }
        out
    }
}

/// Plays back a label timeline as key presses, ignoring the game. After
/// the timeline ends it releases all keys, or chases the box if built
/// with [`ScriptedKeys::then_follow`].
#[derive(Debug, Clone)]
pub struct ScriptedKeys {
    schedule: LabelSchedule,
    follow_deadband: Option<f64>,
    held: Held,
}

impl ScriptedKeys {
    pub fn new(schedule: LabelSchedule) -> Self {
        Self {
            schedule,
            follow_deadband: None,
            held: Held::default(),
        }
    }

    pub fn then_follow(mut self, deadband: f64) -> Self {
        self.follow_deadband = Some(deadband);
        self
    }
}

fn follow_class(s: &GameState, deadband: f64) -> ClassLabel {
    let dx = s.box_x - s.bar_x;
    if dx < -deadband {
        ClassLabel::Left
    } else if dx > deadband {
        ClassLabel::Right
    } else {
        ClassLabel::None
    }
}

impl Operator for ScriptedKeys {
    fn poll(&mut self, t: f64, state: &GameState, _game: &GameConfig) -> Vec<(Key, KeyAction)> {
        let want = match (self.schedule.label_at(t), self.follow_deadband) {
            (Some(label), _) => label,
            (None, Some(deadband)) => follow_class(state, deadband),
            (None, None) => ClassLabel::None,
        };
        self.held.goto(want)
    }
}

/// Holds the key toward the falling box until the bar is under it.
#[derive(Debug, Clone)]
pub struct IntentFollower {
    /// Horizontal distance treated as "already there".
    pub deadband: f64,
    held: Held,
}

impl IntentFollower {
    pub fn new(deadband: f64) -> Self {
        Self {
            deadband,
            held: Held::default(),
        }
    }
}

impl Default for IntentFollower {
    fn default() -> Self {
        Self::new(30.0)
    }
}

impl Operator for IntentFollower {
    fn poll(&mut self, _t: f64, s: &GameState, _game: &GameConfig) -> Vec<(Key, KeyAction)> {
        self.held.goto(follow_class(s, self.deadband))
    }
}

/// Key transitions delivered from elsewhere (e.g. a network client); each
/// is stamped with the session time at which it is drained.
pub struct ChannelOperator {
    rx: Receiver<(Key, KeyAction)>,
}

impl ChannelOperator {
    pub fn new(rx: Receiver<(Key, KeyAction)>) -> Self {
        Self { rx }
    }
}

impl Operator for ChannelOperator {
    fn poll(&mut self, _t: f64, _s: &GameState, _g: &GameConfig) -> Vec<(Key, KeyAction)> {
        self.rx.try_iter().collect()
    }
}

/// Receives live session updates (for broadcasting to a UI).
pub trait SessionObserver: Send {
    fn phase(&mut self, _phase: Phase, _duration_s: f64) {}
    fn state(&mut self, _state: &GameState, _phase: Phase, _remaining_s: f64) {}
    fn quality(&mut self, _railed: &[bool]) {}
    fn key(&mut self, _event: &KeyEvent) {}
}

pub struct NullObserver;
impl SessionObserver for NullObserver {}

/// Argmax class; ties go to the lowest class index.
pub fn command_from_prediction(probs: &[f64; 4]) -> ClassLabel {
    let mut best = 0;
    for i in 1..4 {
        if probs[i] > probs[best] {
            best = i;
        }
    }
    ClassLabel::from_index(best).unwrap_or_default()
}

/// Majority vote over the last `window` predictions; ties go to the tied
/// class predicted most recently.
#[derive(Debug, Clone)]
pub struct CommandSmoother {
    window: usize,
    recent: VecDeque<ClassLabel>,
}

impl CommandSmoother {
    pub fn new(window: usize) -> Self {
        Self {
            window,
            recent: VecDeque::with_capacity(window),
        }
    }

    pub fn push(&mut self, label: ClassLabel) -> ClassLabel {
        if self.window <= 1 {
            return label;
        }
        if self.recent.len() == self.window {
            self.recent.pop_front();
        }
        self.recent.push_back(label);
        let mut counts = [0usize; 4];
        for l in &self.recent {
            counts[l.index()] += 1;
        }
        let top = *counts.iter().max().unwrap_or(&0);
        *self
            .recent
            .iter()
            .rev()
            .find(|l| counts[l.index()] == top)
            .unwrap_or(&label)
    }
}

/// What drives the bar during a phase.
#[derive(Clone, Copy)]
pub enum Driver<'m> {
    Keys,
    Model(&'m Classifier),
    /// Fixed command, as a baseline controller.
    Constant(ClassLabel),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommandEntry {
    pub t: f64,
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseStats {
    pub start_t: f64,
    pub end_t: f64,
    pub boxes_caught: u32,
    pub misses: u32,
    pub max_streak: u32,
    pub frames: usize,
    pub predictions: usize,
    /// Issued model commands that matched the operator's key class.
    pub agreements: usize,
}

impl PhaseStats {
    pub fn agreement(&self) -> Option<f64> {
        (self.predictions > 0).then(|| self.agreements as f64 / self.predictions as f64)
    }
}

/// One session's mutable world: source, pipeline, game and logs.
pub struct SessionRunner<'a> {
    cfg: SessionConfig,
    source: &'a mut dyn SampleSource,
    operator: &'a mut dyn Operator,
    observer: &'a mut dyn SessionObserver,
    pipeline: Pipeline,
    rng: ChaCha8Rng,
    state: GameState,
    key_log: KeyLog,
    commands: Vec<CommandEntry>,
    frames: Vec<LabeledExample>,
    samples: u64,
    ticks: u64,
    quality_buf: Vec<RawSample>,
    montage: MontageConfig,
    started_ms: u64,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Samples at or beyond this magnitude count as railed.
const RAIL_UV: f64 = FULL_SCALE_UV * 0.99;

impl<'a> SessionRunner<'a> {
    pub fn new(
        cfg: &SessionConfig,
        source: &'a mut dyn SampleSource,
        operator: &'a mut dyn Operator,
        observer: &'a mut dyn SessionObserver,
    ) -> Result<Self, EngineError> {
        cfg.plan.validate()?;
        cfg.game.validate()?;
        let sampling = source.sampling().clone();
        cfg.montage.validate(sampling.channel_count)?;
        let pipeline = Pipeline::new(&sampling, &cfg.window)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let state = GameState::new(&cfg.game, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            source,
            operator,
            observer,
            pipeline,
            rng,
            state,
            key_log: KeyLog::new(),
            commands: Vec::new(),
            frames: Vec::new(),
            samples: 0,
            ticks: 0,
            quality_buf: Vec::new(),
            montage: cfg.montage.clone(),
            started_ms: now_ms(),
        })
    }

    pub fn t(&self) -> f64 {
        self.samples as f64 * self.pipeline.sampling().dt()
    }

    pub fn state(&self) -> &GameState {
        &self.state
    }

    pub fn frames(&self) -> &[LabeledExample] {
        &self.frames
    }

    pub fn commands(&self) -> &[CommandEntry] {
        &self.commands
    }

    pub fn key_log(&self) -> &KeyLog {
        &self.key_log
    }

    pub fn is_realtime(&self) -> bool {
        self.source.is_realtime()
    }

    /// Tells the observer a phase without game play has begun.
    pub fn announce(&mut self, phase: Phase, duration_s: f64) {
        self.observer.phase(phase, duration_s);
    }

    fn key_class(&self) -> ClassLabel {
        let (l, r) = (self.key_log.is_down(Key::Left), self.key_log.is_down(Key::Right));
        ClassLabel::from_keys(l, r)
    }

    fn apply_keys(&mut self, t: f64, keys: Vec<(Key, KeyAction)>) {
        for (key, action) in keys {
            let e = KeyEvent { t, key, action };
            match self.key_log.push(e) {
                Ok(()) => self.observer.key(&e),
                Err(err) => log::debug!("ignored key event: {err}"),
            }
        }
    }

    fn pull(&mut self) -> Result<RawSample, EngineError> {
        let intent = self.key_class();
        let t = self.t();
        let mut s = match self.source.next_sample(intent) {
            Ok(Some(s)) => s,
            Ok(None) => return Err(EngineError::SourceLost(format!("stream ended at t = {t:.3} s"))),
            Err(e) => return Err(EngineError::SourceLost(e.to_string())),
        };
        s.t = t;
        self.samples += 1;
        self.quality_buf.push(s.clone());
        let every = (self.cfg.quality_interval_s * self.pipeline.sampling().sample_rate).max(1.0) as usize;
        if self.quality_buf.len() >= every {
            self.montage.update_quality(&self.quality_buf, RAIL_UV);
            self.quality_buf.clear();
            let flags = self.montage.railed_flags();
            self.observer.quality(&flags);
        }
        Ok(s)
    }

    /// Consumes one sample without game or labeling, keeping the filters
    /// and windows current (used while a model trains).
    pub fn idle_sample(&mut self) -> Result<(), EngineError> {
        let s = self.pull()?;
        self.pipeline.push(&s);
        self.ticks = (self.t() * self.cfg.game.tick_hz).ceil() as u64;
        Ok(())
    }

    /// Runs one phase for its planned duration.
    pub fn run_phase(&mut self, phase: Phase, driver: Driver<'_>) -> Result<PhaseStats, EngineError> {
        self.run_phase_for(phase, self.cfg.plan.duration(phase), driver)
    }

    pub fn run_phase_for(&mut self, phase: Phase, duration: f64, driver: Driver<'_>) -> Result<PhaseStats, EngineError> {
        if let Driver::Model(m) = driver {
            let shape = (m.norm.channels, m.norm.bins);
            let want = (self.pipeline.sampling().channel_count, self.pipeline.window().bins());
            if shape != want {
                return Err(ModelError::ShapeMismatch(format!("model expects {shape:?}, pipeline gives {want:?}")).into());
            }
        }
        let dt = self.pipeline.sampling().dt();
        let tick_dt = self.cfg.game.tick_dt();
        let start = self.t();
        let end_sample = self.samples + (duration / dt).round() as u64;
        let mut stats = PhaseStats {
            start_t: start,
            ..Default::default()
        };
        self.state.streak = 0;
        self.state.max_streak = 0;
        let (score0, misses0) = (self.state.score, self.state.misses);
        let mut smoother = CommandSmoother::new(self.cfg.plan.smoothing);
        let mut model_cmd = match driver {
            Driver::Constant(c) => c,
            _ => ClassLabel::None,
        };
        self.observer.phase(phase, duration);

        while self.samples < end_sample {
            let now = self.t();
            while (self.ticks as f64) * tick_dt <= now + 1e-9 {
                let tick_t = self.ticks as f64 * tick_dt;
                let keys = self.operator.poll(tick_t, &self.state, &self.cfg.game);
                self.apply_keys(tick_t, keys);
                let command = match driver {
                    Driver::Keys => Command::keys(self.key_class()),
                    Driver::Model(_) | Driver::Constant(_) => Command::model(model_cmd),
                };
                self.commands.push(CommandEntry { t: tick_t, command });
                self.state = game_step(&self.state, &self.cfg.game, command, tick_dt, &mut self.rng);
                self.state.t = tick_t + tick_dt;
                let remaining = (start + duration - tick_t).max(0.0);
                self.observer.state(&self.state, phase, remaining);
                self.ticks += 1;
            }

            let sample = self.pull()?;
            let Some(fv) = self.pipeline.push(&sample) else {
                continue;
            };
            let truth = label_at(&self.key_log, fv.t);
            match driver {
                Driver::Keys => {}
                Driver::Model(m) => {
                    let probs = m.predict_proba(&fv)?;
                    model_cmd = smoother.push(command_from_prediction(&probs));
                    stats.predictions += 1;
                    stats.agreements += usize::from(model_cmd == truth);
                }
                Driver::Constant(c) => {
                    stats.predictions += 1;
                    stats.agreements += usize::from(c == truth);
                }
            }
            if fv.t >= TRANSIENT_SECS {
                self.record_frame(fv, truth);
                stats.frames += 1;
            }
        }
        stats.end_t = self.t();
        stats.boxes_caught = self.state.score - score0;
        stats.misses = self.state.misses - misses0;
        stats.max_streak = self.state.max_streak;
        Ok(stats)
    }

    fn record_frame(&mut self, fv: FeatureVector, label: ClassLabel) {
        let t = fv.t;
        self.frames.push(LabeledExample {
            features: fv,
            label,
            session_id: self.cfg.session_id.clone(),
            t,
        });
    }

    /// Assembles the session record; `frames` selects which frames to keep.
    pub fn into_record(self, kind: &str, metrics: SessionMetrics) -> SessionRecord {
        self.record_with(kind, metrics, |_| true)
    }

    fn record_with(self, kind: &str, metrics: SessionMetrics, keep: impl Fn(&LabeledExample) -> bool) -> SessionRecord {
        let sampling = self.pipeline.sampling().clone();
        let header = SessionHeader {
            session_id: self.cfg.session_id.clone(),
            subject_id: self.cfg.subject_id.clone(),
            kind: kind.into(),
            start_unix_ms: self.started_ms,
            software_version: env!("CARGO_PKG_VERSION").into(),
            seed: self.cfg.seed,
            normalization: NORMALIZATION_NOTE.into(),
            sampling,
            montage: self.montage.clone(),
            filter: self.pipeline.filter_summary(),
            window: self.pipeline.window().clone(),
            synth: self.source.synth_config(),
        };
        SessionRecord {
            header,
            frames: self.frames.into_iter().filter(keep).collect(),
            key_log: self.key_log,
            metrics,
        }
    }
}

/// Key-driven recording for the configured training duration.
pub fn run_training_session(
    cfg: &SessionConfig,
    source: &mut dyn SampleSource,
    operator: &mut dyn Operator,
    observer: &mut dyn SessionObserver,
) -> Result<(SessionRecord, PhaseStats), EngineError> {
    let mut runner = SessionRunner::new(cfg, source, operator, observer)?;
    let stats = runner.run_phase(Phase::Training, Driver::Keys)?;
    let metrics = SessionMetrics {
        boxes_caught: Some(stats.boxes_caught),
        max_streak: Some(stats.max_streak),
        ..Default::default()
    };
    Ok((runner.into_record("training", metrics), stats))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoOutcome {
    pub record: SessionRecord,
    pub stats: PhaseStats,
    pub commands: Vec<CommandEntry>,
}

/// Model-driven play; keys are logged but never move the bar.
pub fn run_demo(
    model: &Classifier,
    cfg: &SessionConfig,
    source: &mut dyn SampleSource,
    operator: &mut dyn Operator,
    observer: &mut dyn SessionObserver,
) -> Result<DemoOutcome, EngineError> {
    let mut runner = SessionRunner::new(cfg, source, operator, observer)?;
    let stats = runner.run_phase(Phase::Demo, Driver::Model(model))?;
    let commands = runner.commands().to_vec();
    let metrics = SessionMetrics {
        boxes_caught: Some(stats.boxes_caught),
        max_streak: Some(stats.max_streak),
        ..Default::default()
    };
    Ok(DemoOutcome {
        record: runner.into_record("demo", metrics),
        stats,
        commands,
    })
}

/// Which model the validation protocol fits after the keyed recording.
#[derive(Clone, Copy)]
pub enum ValidationModel<'m> {
    /// Trained from the recording alone (any kind).
    Fresh(&'m ModelConfig),
    /// Dense layers of a pre-trained network retrained on the recording.
    Transfer(&'m Classifier, &'m crate::models::TrainConfig),
    /// Skip training; drive the control phase with a constant command.
    Baseline(ClassLabel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub session_id: String,
    pub subject_id: String,
    /// knn, lda, cnn, or `baseline-<class>`.
    pub model: String,
    pub training_accuracy: Option<f64>,
    pub boxes_caught: u32,
    pub max_streak: u32,
    pub agreement: Option<f64>,
    pub user_rating: Option<u8>,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationOutcome {
    pub row: ValidationRow,
    pub record: SessionRecord,
    pub record_stats: PhaseStats,
    pub control_stats: PhaseStats,
    /// Commands issued during the control phase.
    pub control_commands: Vec<CommandEntry>,
    pub model: Option<Classifier>,
}

fn fit_validation_model(
    which: ValidationModel<'_>,
    frames: &[LabeledExample],
    seed: u64,
) -> Result<Option<Classifier>, EngineError> {
    let balanced = || balance(frames.to_vec(), seed);
    Ok(match which {
        ValidationModel::Fresh(cfg) => Some(train_classifier(&balanced()?, cfg)?),
        ValidationModel::Transfer(base, train) => {
            if base.kind() != ModelKind::Cnn {
                return Err(EngineError::InvalidConfig("transfer needs a pre-trained CNN".into()));
            }
            Some(transfer_classifier(base, &balanced()?, train)?)
        }
        ValidationModel::Baseline(_) => None,
    })
}

/// Keyed recording → model fit → model-controlled play → user rating.
///
/// `rating` is asked once after the control phase. Without a rating the
/// finished but incomplete outcome is returned inside
/// [`EngineError::RatingMissing`].
pub fn run_validation(
    which: ValidationModel<'_>,
    cfg: &SessionConfig,
    source: &mut dyn SampleSource,
    operator: &mut dyn Operator,
    observer: &mut dyn SessionObserver,
    rating: &mut dyn FnMut() -> Option<u8>,
) -> Result<ValidationOutcome, EngineError> {
    let mut runner = SessionRunner::new(cfg, source, operator, observer)?;
    let record_stats = runner.run_phase(Phase::Record, Driver::Keys)?;
    let recorded: Vec<LabeledExample> = runner.frames().to_vec();
    let n_recorded = recorded.len();

    let model = if runner.is_realtime() {
        // Keep draining the device so its buffer never overflows.
        std::thread::scope(|scope| -> Result<Option<Classifier>, EngineError> {
            let job = scope.spawn(|| fit_validation_model(which, &recorded, cfg.seed));
            while !job.is_finished() {
                runner.idle_sample()?;
            }
            job.join().expect("training thread panicked")
        })?
    } else {
        fit_validation_model(which, &recorded, cfg.seed)?
    };

    let driver = match (&model, which) {
        (Some(m), _) => Driver::Model(m),
        (None, ValidationModel::Baseline(c)) => Driver::Constant(c),
        (None, _) => unreachable!("only the baseline skips training"),
    };
    let control_start = runner.commands().len();
    let control_stats = runner.run_phase(Phase::Control, driver)?;
    let control_commands = runner.commands()[control_start..].to_vec();

    runner.announce(Phase::Rating, cfg.plan.rating_timeout_s);
    let user_rating = rating().filter(|r| (1..=5).contains(r));
    let training_accuracy = model.as_ref().map(|m| m.meta.training_accuracy);
    let row = ValidationRow {
        session_id: cfg.session_id.clone(),
        subject_id: cfg.subject_id.clone(),
        model: match (&model, which) {
            (Some(m), _) => m.kind().to_string(),
            (None, ValidationModel::Baseline(c)) => format!("baseline-{c}"),
            (None, _) => unreachable!(),
        },
        training_accuracy,
        boxes_caught: control_stats.boxes_caught,
        max_streak: control_stats.max_streak,
        agreement: control_stats.agreement(),
        user_rating,
        complete: user_rating.is_some(),
    };
    let metrics = SessionMetrics {
        boxes_caught: Some(row.boxes_caught),
        max_streak: Some(row.max_streak),
        user_rating,
        training_accuracy,
    };
    // The stored frames are the keyed recording the model was fitted on.
    let record = runner.record_with("validation", metrics, |f| f.t < control_stats.start_t);
    debug_assert_eq!(record.frames.len(), n_recorded);
    let outcome = ValidationOutcome {
        row,
        record,
        record_stats,
        control_stats,
        control_commands,
        model,
    };
    if outcome.row.complete {
        Ok(outcome)
    } else {
        Err(EngineError::RatingMissing(Box::new(outcome)))
    }
}
