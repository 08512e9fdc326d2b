use serde::{Deserialize, Serialize};

use super::DatasetError;

/// Motor state of the two control keys. The discriminant is the on-disk
/// and network encoding.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default,
)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum ClassLabel {
    #[default]
    None = 0,
    Left = 1,
    Right = 2,
    Both = 3,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 4] = [
        ClassLabel::None,
        ClassLabel::Left,
        ClassLabel::Right,
        ClassLabel::Both,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn from_keys(left: bool, right: bool) -> Self {
        match (left, right) {
            (false, false) => ClassLabel::None,
            (true, false) => ClassLabel::Left,
            (false, true) => ClassLabel::Right,
            (true, true) => ClassLabel::Both,
        }
    }

    pub fn includes_left(self) -> bool {
        matches!(self, ClassLabel::Left | ClassLabel::Both)
    }

    pub fn includes_right(self) -> bool {
        matches!(self, ClassLabel::Right | ClassLabel::Both)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::None => "none",
            ClassLabel::Left => "left",
            ClassLabel::Right => "right",
            ClassLabel::Both => "both",
        }
    }
}

impl std::fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Key {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyAction {
    Down,
    Up,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyEvent {
    pub t: f64,
    pub key: Key,
    pub action: KeyAction,
}

/// Time-ordered key transitions; per key, downs and ups alternate starting
/// with a down.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyLog {
    events: Vec<KeyEvent>,
}

impl KeyLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_events(events: Vec<KeyEvent>) -> Result<Self, DatasetError> {
        let mut log = Self::new();
        for e in events {
            log.push(e)?;
        }
        Ok(log)
    }

    pub fn events(&self) -> &[KeyEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Whether `key` is held after all logged events.
    pub fn is_down(&self, key: Key) -> bool {
        self.events
            .iter()
            .rev()
            .find(|e| e.key == key)
            .is_some_and(|e| e.action == KeyAction::Down)
    }

    pub fn push(&mut self, e: KeyEvent) -> Result<(), DatasetError> {
        if !e.t.is_finite() || e.t < 0.0 {
            return Err(DatasetError::InvalidKeyLog(format!("bad time {}", e.t)));
        }
        if let Some(last) = self.events.last() {
            if e.t < last.t {
                return Err(DatasetError::InvalidKeyLog(format!(
                    "event at {} precedes {}",
                    e.t, last.t
                )));
            }
        }
        let held = self.is_down(e.key);
        match (held, e.action) {
            (false, KeyAction::Down) | (true, KeyAction::Up) => {}
            _ => {
                return Err(DatasetError::InvalidKeyLog(format!(
                    "{:?} {:?} at {} does not alternate",
                    e.key, e.action, e.t
                )))
            }
        }
        self.events.push(e);
        Ok(())
    }

    /// Key state after every event with `event.t <= t`.
    pub fn state_at(&self, t: f64) -> (bool, bool) {
        let end = self.events.partition_point(|e| e.t <= t);
        let (mut left, mut right) = (false, false);
        for e in &self.events[..end] {
            let down = e.action == KeyAction::Down;
            match e.key {
                Key::Left => left = down,
                Key::Right => right = down,
            }
        }
        (left, right)
    }
}

/// Class implied by the key state at `t`; events stamped exactly `t`
/// already apply.
pub fn label_at(log: &KeyLog, t: f64) -> ClassLabel {
    let (l, r) = log.state_at(t);
    ClassLabel::from_keys(l, r)
}
