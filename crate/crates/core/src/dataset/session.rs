//! Session files.
//!
//! ```text
//! "BCIS" | version u16 | header_len u32 | header (TOML, UTF-8)
//! frame_count u32 | frame_count × (t f64, label u8, channels·bins × f32)
//! key_count u32   | key_count × (t f64, key u8, action u8)
//! metrics: present u8 bitmask, boxes u32, max_streak u32, rating u8, accuracy f64
//! CRC-64/XZ u64 over every preceding byte
//! ```
//! All integers and floats little-endian.

use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use super::{label_at, ClassLabel, DatasetError, Key, KeyAction, KeyEvent, KeyLog, LabeledExample};
use crate::acquisition::{MontageConfig, SamplingConfig, SynthConfig};
use crate::features::{FeatureVector, WindowConfig};
use crate::signal::DesignSummary;

pub const SESSION_MAGIC: &[u8; 4] = b"BCIS";
pub const SESSION_FORMAT_VERSION: u16 = 1;
pub(crate) const CRC64: crc::Crc<u64> = crc::Crc::<u64>::new(&crc::CRC_64_XZ);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHeader {
    pub session_id: String,
    pub subject_id: String,
    /// training, demo, validation, ...
    pub kind: String,
    pub start_unix_ms: u64,
    pub software_version: String,
    pub seed: u64,
    /// How classifier inputs are derived from the stored magnitudes.
    pub normalization: String,
    pub sampling: SamplingConfig,
    pub montage: MontageConfig,
    pub filter: DesignSummary,
    pub window: WindowConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
}

impl SessionHeader {
    pub fn bins(&self) -> usize {
        self.window.bins()
    }
}

/// Default description written to `SessionHeader::normalization`.
pub const NORMALIZATION_NOTE: &str =
    "stored: raw FFT magnitudes; model input: (ln(1+m) - mean) / std per feature, fitted on the training split";

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub boxes_caught: Option<u32>,
    pub max_streak: Option<u32>,
    pub user_rating: Option<u8>,
    pub training_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionRecord {
    pub header: SessionHeader,
    pub frames: Vec<LabeledExample>,
    pub key_log: KeyLog,
    pub metrics: SessionMetrics,
}

impl SessionRecord {
    /// Recomputes every frame label from the key log; returns how many
    /// agree with the stored labels.
    pub fn relabel_agreement(&self) -> usize {
        self.frames
            .iter()
            .filter(|f| label_at(&self.key_log, f.t) == f.label)
            .count()
    }
}

fn put_u16(b: &mut Vec<u8>, v: u16) {
    b.extend_from_slice(&v.to_le_bytes());
}
fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn usize_to_u32(n: usize, what: &str) -> Result<u32, DatasetError> {
    u32::try_from(n).map_err(|_| DatasetError::CorruptFile(format!("{what} count {n} exceeds u32")))
}

pub fn encode_session(rec: &SessionRecord) -> Result<Vec<u8>, DatasetError> {
    let header = toml::to_string(&rec.header).map_err(|e| DatasetError::Header(e.to_string()))?;
    let channels = rec.header.sampling.channel_count;
    let bins = rec.header.bins();
    let mut b = Vec::new();
    b.extend_from_slice(SESSION_MAGIC);
    put_u16(&mut b, SESSION_FORMAT_VERSION);
    put_u32(&mut b, usize_to_u32(header.len(), "header")?);
    b.extend_from_slice(header.as_bytes());

    put_u32(&mut b, usize_to_u32(rec.frames.len(), "frame")?);
    for f in &rec.frames {
        if f.features.mags.len() != channels * bins {
            return Err(DatasetError::CorruptFile(format!(
                "frame at t={} has {} magnitudes, header implies {}",
                f.t,
                f.features.mags.len(),
                channels * bins
            )));
        }
        b.extend_from_slice(&f.t.to_le_bytes());
        b.push(f.label as u8);
        for m in &f.features.mags {
            b.extend_from_slice(&m.to_le_bytes());
        }
    }

    put_u32(&mut b, usize_to_u32(rec.key_log.len(), "key event")?);
    for e in rec.key_log.events() {
        b.extend_from_slice(&e.t.to_le_bytes());
        b.push(match e.key {
            Key::Left => 0,
            Key::Right => 1,
        });
        b.push(match e.action {
            KeyAction::Down => 0,
            KeyAction::Up => 1,
        });
    }

    let m = &rec.metrics;
    let mask = (m.boxes_caught.is_some() as u8)
        | (m.max_streak.is_some() as u8) << 1
        | (m.user_rating.is_some() as u8) << 2
        | (m.training_accuracy.is_some() as u8) << 3;
    b.push(mask);
    put_u32(&mut b, m.boxes_caught.unwrap_or(0));
    put_u32(&mut b, m.max_streak.unwrap_or(0));
    b.push(m.user_rating.unwrap_or(0));
    b.extend_from_slice(&m.training_accuracy.unwrap_or(0.0).to_le_bytes());

    let sum = CRC64.checksum(&b);
    b.extend_from_slice(&sum.to_le_bytes());
    Ok(b)
}

/// Bounds-checked little-endian reader.
pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| DatasetError::CorruptFile(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, DatasetError> {
        Ok(self.take(1)?[0])
    }
    pub(crate) fn u16(&mut self) -> Result<u16, DatasetError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub(crate) fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub(crate) fn f32(&mut self) -> Result<f32, DatasetError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub(crate) fn f64(&mut self) -> Result<f64, DatasetError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Splits off and verifies the trailing CRC, returning the body.
pub(crate) fn verify_checksum<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<&'a [u8], DatasetError> {
    if bytes.len() < 4 + 2 + 8 || &bytes[..4] != magic {
        return Err(DatasetError::CorruptFile("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != SESSION_FORMAT_VERSION {
        return Err(DatasetError::FormatVersionMismatch {
            found: version,
            expected: SESSION_FORMAT_VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if CRC64.checksum(body) != stored {
        return Err(DatasetError::CorruptFile("checksum mismatch".into()));
    }
    Ok(body)
}

pub fn decode_session(bytes: &[u8]) -> Result<SessionRecord, DatasetError> {
    let body = verify_checksum(bytes, SESSION_MAGIC)?;
    let mut c = Cursor::new(body);
    c.take(6)?;
    let hlen = c.u32()? as usize;
    let htext = std::str::from_utf8(c.take(hlen)?)
        .map_err(|e| DatasetError::CorruptFile(format!("header utf-8: {e}")))?;
    let header: SessionHeader =
        toml::from_str(htext).map_err(|e| DatasetError::Header(e.to_string()))?;
    let channels = header.sampling.channel_count;
    let bins = header.bins();
    let fs = header.sampling.sample_rate;

    let n = c.u32()? as usize;
    let mut frames = Vec::with_capacity(n.min(c.remaining() / (9 + 4 * channels * bins).max(1)));
    for _ in 0..n {
        let t = c.f64()?;
        let label = ClassLabel::from_index(c.u8()? as usize)
            .ok_or_else(|| DatasetError::CorruptFile("label out of range".into()))?;
        let mut mags = Vec::with_capacity(channels * bins);
        for _ in 0..channels * bins {
            mags.push(c.f32()?);
        }
        frames.push(LabeledExample {
            features: FeatureVector::from_mags(t, channels, bins, mags, fs),
            label,
            session_id: header.session_id.clone(),
            t,
        });
    }

    let k = c.u32()? as usize;
    let mut key_log = KeyLog::new();
    for _ in 0..k {
        let t = c.f64()?;
        let key = match c.u8()? {
            0 => Key::Left,
            1 => Key::Right,
            x => return Err(DatasetError::CorruptFile(format!("key code {x}"))),
        };
        let action = match c.u8()? {
            0 => KeyAction::Down,
            1 => KeyAction::Up,
            x => return Err(DatasetError::CorruptFile(format!("action code {x}"))),
        };
        key_log.push(KeyEvent { t, key, action })?;
    }

    let mask = c.u8()?;
    let boxes = c.u32()?;
    let streak = c.u32()?;
    let rating = c.u8()?;
    let acc = c.f64()?;
    let metrics = SessionMetrics {
        boxes_caught: (mask & 1 != 0).then_some(boxes),
        max_streak: (mask & 2 != 0).then_some(streak),
        user_rating: (mask & 4 != 0).then_some(rating),
        training_accuracy: (mask & 8 != 0).then_some(acc),
    };
    if c.remaining() != 0 {
        return Err(DatasetError::CorruptFile(format!(
            "{} trailing bytes",
            c.remaining()
        )));
    }
    Ok(SessionRecord {
        header,
        frames,
        key_log,
        metrics,
    })
}

/// Writes via a temporary sibling and rename so readers never see a
/// partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_session(rec: &SessionRecord, path: &Path) -> Result<(), DatasetError> {
    write_atomic(path, &encode_session(rec)?)
}

pub fn load_session(path: &Path) -> Result<SessionRecord, DatasetError> {
    decode_session(&std::fs::read(path)?)
}
