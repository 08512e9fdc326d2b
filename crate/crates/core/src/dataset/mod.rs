//! Labeled datasets: key-log labeling, class balancing, train/test splits,
//! multi-session consolidation and session persistence.

mod label;
mod ops;
mod raw;
mod session;

pub use label::{label_at, ClassLabel, Key, KeyAction, KeyEvent, KeyLog};
pub use ops::{balance, consolidate, split, SplitMode, TRANSIENT_SECS};
pub use raw::RawRecording;
pub use session::{
    decode_session, encode_session, load_session, save_session, SessionHeader, SessionMetrics, SessionRecord,
    NORMALIZATION_NOTE, SESSION_FORMAT_VERSION,
};
pub(crate) use session::{verify_checksum, write_atomic, Cursor, CRC64};

use crate::features::FeatureVector;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid key log: {0}")]
    InvalidKeyLog(String),
    #[error("file format version {found}, this build reads {expected}")]
    FormatVersionMismatch { found: u16, expected: u16 },
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("header: {0}")]
    Header(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Anything carrying a class label and a timestamp.
pub trait Labeled {
    fn label(&self) -> ClassLabel;
    fn t(&self) -> f64;
}

/// One feature frame with its class.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub features: FeatureVector,
    pub label: ClassLabel,
    pub session_id: String,
    pub t: f64,
}

impl Labeled for LabeledExample {
    fn label(&self) -> ClassLabel {
        self.label
    }
    fn t(&self) -> f64 {
        self.t
    }
}

/// Per-class counts indexed by [`ClassLabel::index`].
pub fn class_counts<T: Labeled>(items: &[T]) -> [usize; 4] {
    let mut c = [0; 4];
    for it in items {
        c[it.label().index()] += 1;
    }
    c
}

/// Parses a decimal fraction into parts-per-million so `floor(f·n)` is
/// computed in integers.
pub(crate) fn take_count(fraction: f64, n: usize) -> usize {
    let ppm = (fraction.clamp(0.0, 1.0) * 1e6).round() as u128;
    ((n as u128 * ppm) / 1_000_000) as usize
}
