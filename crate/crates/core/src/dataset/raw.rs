//! Raw recording files: `"BCIR"`, version u16, header_len u32, TOML
//! [`SamplingConfig`] header, then packed little-endian f32 rows of
//! `channel_count` µV values until end of file.

use std::path::Path;

use super::session::{write_atomic, Cursor, SESSION_FORMAT_VERSION};
use super::DatasetError;
use crate::acquisition::{RawSample, SamplingConfig};

pub const RAW_MAGIC: &[u8; 4] = b"BCIR";

#[derive(Debug, Clone, PartialEq)]
pub struct RawRecording {
    pub sampling: SamplingConfig,
    pub rows: Vec<Vec<f32>>,
}

impl RawRecording {
    pub fn from_samples(sampling: SamplingConfig, samples: &[RawSample]) -> Self {
        Self {
            sampling,
            rows: samples
                .iter()
                .map(|s| s.volts.iter().map(|&v| v as f32).collect())
                .collect(),
        }
    }

    pub fn to_samples(&self) -> Vec<RawSample> {
        let dt = self.sampling.dt();
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| RawSample {
                seq: (i % 256) as u8,
                t: i as f64 * dt,
                volts: r.iter().map(|&v| v as f64).collect(),
            })
            .collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>, DatasetError> {
        let header =
            toml::to_string(&self.sampling).map_err(|e| DatasetError::Header(e.to_string()))?;
        let mut b = Vec::with_capacity(10 + header.len() + self.rows.len() * self.sampling.channel_count * 4);
        b.extend_from_slice(RAW_MAGIC);
        b.extend_from_slice(&SESSION_FORMAT_VERSION.to_le_bytes());
        b.extend_from_slice(&(header.len() as u32).to_le_bytes());
        b.extend_from_slice(header.as_bytes());
        for row in &self.rows {
            if row.len() != self.sampling.channel_count {
                return Err(DatasetError::CorruptFile("row width mismatch".into()));
            }
            for v in row {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(b)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DatasetError> {
        if bytes.len() < 10 || &bytes[..4] != RAW_MAGIC {
            return Err(DatasetError::CorruptFile("bad magic".into()));
        }
        let mut c = Cursor::new(bytes);
        c.take(4)?;
        let version = c.u16()?;
        if version != SESSION_FORMAT_VERSION {
            return Err(DatasetError::FormatVersionMismatch {
                found: version,
                expected: SESSION_FORMAT_VERSION,
            });
        }
        let hlen = c.u32()? as usize;
        let text = std::str::from_utf8(c.take(hlen)?)
            .map_err(|e| DatasetError::CorruptFile(e.to_string()))?;
        let sampling: SamplingConfig =
            toml::from_str(text).map_err(|e| DatasetError::Header(e.to_string()))?;
        let width = sampling.channel_count * 4;
        if width == 0 || c.remaining() % width != 0 {
            return Err(DatasetError::CorruptFile("partial row at end of file".into()));
        }
        let mut rows = Vec::with_capacity(c.remaining() / width);
        while c.remaining() > 0 {
            let mut row = Vec::with_capacity(sampling.channel_count);
            for _ in 0..sampling.channel_count {
                row.push(c.f32()?);
            }
            rows.push(row);
        }
        Ok(Self { sampling, rows })
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        Self::decode(&std::fs::read(path)?)
    }
}
