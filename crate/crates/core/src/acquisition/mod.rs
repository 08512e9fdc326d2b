//! EEG sample acquisition.
//!
//! Two producers feed the pipeline: a decoder for the OpenBCI Cyton 33-byte
//! serial frame and a seeded synthetic generator whose mu-rhythm power is
//! lateralized by the current class label. Both emit [`RawSample`]s in µV.

mod cyton;
mod stream;
mod synth;

pub use cyton::{
    counts_to_microvolts, decode_counts, encode_packet, parse_cyton_packet, AdcCount,
    CytonFramer, PACKET_LEN,
};
pub use stream::{stream_source, SeqTracker, SourceKind, StreamHandle, StreamOptions};
pub use synth::{synth_stream, Hemisphere, LabelSchedule, SynthConfig, SynthSource};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound on |µV| representable by the 24-bit front end at gain 1.
pub const FULL_SCALE_UV: f64 = 200_000.0;

#[derive(Debug, Error)]
pub enum AcqError {
    #[error("packet header byte {0:#04x}, expected 0xa0")]
    BadHeader(u8),
    #[error("packet footer byte {0:#04x} outside 0xc0..=0xcf")]
    BadFooter(u8),
    #[error("packet length {0}, expected 33")]
    ShortPacket(usize),
    #[error("no label scheduled at t = {0:.4} s")]
    ScheduleGap(f64),
    #[error("source unavailable: {0}")]
    SourceUnavailable(String),
    #[error("sequence gap of {gap} packets exceeds the desync limit")]
    DesyncDetected { gap: u32 },
    #[error("sample FIFO overflowed; consumer fell behind the acquisition rate")]
    Overflow,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Sampling parameters of the front end. Defaults are the Cyton board's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub sample_rate: f64,
    pub channel_count: usize,
    pub adc_bits: u8,
    pub gain: f64,
    pub mains_freq: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            sample_rate: 250.0,
            channel_count: 8,
            adc_bits: 24,
            gain: 24.0,
            mains_freq: 50.0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), AcqError> {
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(AcqError::InvalidConfig(format!(
                "sample_rate {} must be positive",
                self.sample_rate
            )));
        }
        if self.channel_count == 0 {
            return Err(AcqError::InvalidConfig("channel_count must be >= 1".into()));
        }
        if !(12..=24).contains(&self.adc_bits) {
            return Err(AcqError::InvalidConfig(format!(
                "adc_bits {} outside 12..=24",
                self.adc_bits
            )));
        }
        if !(self.gain > 0.0) {
            return Err(AcqError::InvalidConfig("gain must be positive".into()));
        }
        if self.mains_freq != 50.0 && self.mains_freq != 60.0 {
            return Err(AcqError::InvalidConfig(format!(
                "mains_freq {} must be 50 or 60",
                self.mains_freq
            )));
        }
        Ok(())
    }

    /// Seconds between consecutive samples.
    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelQuality {
    Good,
    Railed,
}

/// Electrode positions (10-20 / 10-10 labels) and contact quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MontageConfig {
    pub positions: Vec<String>,
    pub channel_quality: Vec<ChannelQuality>,
}

impl Default for MontageConfig {
    fn default() -> Self {
        let positions = ["Cz", "C1", "C2", "C3", "C4", "Cp1", "Cp2", "Fpz"]
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>();
        let channel_quality = vec![ChannelQuality::Good; positions.len()];
        Self {
            positions,
            channel_quality,
        }
    }
}

impl MontageConfig {
    pub fn validate(&self, channel_count: usize) -> Result<(), AcqError> {
        if self.positions.len() != channel_count || self.channel_quality.len() != channel_count {
            return Err(AcqError::InvalidConfig(format!(
                "montage has {} positions / {} quality flags for {} channels",
                self.positions.len(),
                self.channel_quality.len(),
                channel_count
            )));
        }
        for p in &self.positions {
            if !is_1020_label(p) {
                return Err(AcqError::InvalidConfig(format!(
                    "{p:?} is not a 10-20/10-10 position"
                )));
            }
        }
        Ok(())
    }

    /// Flags channels whose samples sit at the ADC rails.
    pub fn update_quality(&mut self, samples: &[RawSample], rail_uv: f64) {
        for (c, q) in self.channel_quality.iter_mut().enumerate() {
            let railed = !samples.is_empty()
                && samples
                    .iter()
                    .all(|s| s.volts.get(c).is_some_and(|v| v.abs() >= rail_uv));
            *q = if railed {
                ChannelQuality::Railed
            } else {
                ChannelQuality::Good
            };
        }
    }

    pub fn railed_flags(&self) -> Vec<bool> {
        self.channel_quality
            .iter()
            .map(|q| *q == ChannelQuality::Railed)
            .collect()
    }
}

/// Region prefixes of the 10-10 nomenclature, longest first.
const REGIONS: &[&str] = &[
    "Fpz", "Fp", "AF", "FC", "FT", "CP", "TP", "PO", "F", "C", "T", "P", "O", "I", "A", "N", "M",
];

fn is_1020_label(label: &str) -> bool {
    let upper = label.to_ascii_uppercase();
    for region in REGIONS {
        let r = region.to_ascii_uppercase();
        if let Some(rest) = upper.strip_prefix(&r) {
            if *region == "Fpz" {
                return rest.is_empty();
            }
            if rest == "Z" {
                return true;
            }
            if !rest.is_empty() && rest.len() <= 2 && rest.chars().all(|c| c.is_ascii_digit()) {
                return rest != "0";
            }
        }
    }
    false
}

/// One multi-channel reading.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSample {
    /// Packet sequence number, wraps at 256.
    pub seq: u8,
    /// Seconds since session start.
    pub t: f64,
    /// Per-channel voltage in µV.
    pub volts: Vec<f64>,
}

impl RawSample {
    pub fn is_valid(&self) -> bool {
        self.volts
            .iter()
            .all(|v| v.is_finite() && v.abs() < FULL_SCALE_UV)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_configs_validate() {
        let cfg = SamplingConfig::default();
        cfg.validate().unwrap();
        MontageConfig::default().validate(cfg.channel_count).unwrap();
        assert_eq!(cfg.dt(), 0.004);
    }

    #[test]
    fn rejects_bad_sampling() {
        let mut cfg = SamplingConfig {
            mains_freq: 55.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.mains_freq = 60.0;
        cfg.adc_bits = 32;
        assert!(cfg.validate().is_err());
        cfg.adc_bits = 16;
        cfg.channel_count = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn montage_labels() {
        for ok in ["Cz", "C3", "Cp1", "CP2", "Fpz", "Fp1", "O2", "FC10", "Pz"] {
            assert!(is_1020_label(ok), "{ok}");
        }
        for bad in ["Q1", "C", "Cx", "C0", "", "Fpzz"] {
            assert!(!is_1020_label(bad), "{bad}");
        }
        let mut m = MontageConfig::default();
        m.positions.pop();
        assert!(m.validate(8).is_err());
    }

    #[test]
    fn railed_detection() {
        let mut m = MontageConfig::default();
        let samples: Vec<_> = (0..10)
            .map(|i| RawSample {
                seq: i,
                t: 0.0,
                volts: vec![187_500.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, -187_500.0],
            })
            .collect();
        m.update_quality(&samples, 187_000.0);
        let flags = m.railed_flags();
        assert!(flags[0] && flags[7]);
        assert!(!flags[1..7].iter().any(|&f| f));
    }
}
