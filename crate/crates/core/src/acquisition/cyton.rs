//! OpenBCI Cyton serial frame codec.
//!
//! Frame layout (33 bytes): `0xA0`, sequence byte, eight 24-bit big-endian
//! two's-complement channel counts, six aux bytes, footer `0xC0..=0xCF`.

use super::{AcqError, RawSample, SamplingConfig};

pub const PACKET_LEN: usize = 33;
const HEADER: u8 = 0xA0;
const CHANNELS: usize = 8;
const REFERENCE_VOLTS: f64 = 4.5;

/// A signed 24-bit ADC count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AdcCount(i32);

impl AdcCount {
    pub const MIN: i32 = -(1 << 23);
    pub const MAX: i32 = (1 << 23) - 1;

    pub fn new(count: i32) -> Option<Self> {
        (Self::MIN..=Self::MAX).contains(&count).then_some(Self(count))
    }

    pub fn from_be_bytes(b: [u8; 3]) -> Self {
        // Place the 24 bits at the top of an i32 and shift back for sign extension.
        let v = i32::from_be_bytes([b[0], b[1], b[2], 0]) >> 8;
        Self(v)
    }

    pub fn to_be_bytes(self) -> [u8; 3] {
        let b = self.0.to_be_bytes();
        [b[1], b[2], b[3]]
    }

    pub fn get(self) -> i32 {
        self.0
    }
}

/// Converts an ADC count to µV: `count · Vref / (gain · (2^(bits-1) − 1))`.
pub fn counts_to_microvolts(count: AdcCount, cfg: &SamplingConfig) -> f64 {
    let full_scale = ((1_i64 << (cfg.adc_bits - 1)) - 1) as f64;
    (count.0 as f64 * (REFERENCE_VOLTS * 1e6)) / (cfg.gain * full_scale)
}

fn check_framing(bytes: &[u8]) -> Result<(), AcqError> {
    if bytes.len() != PACKET_LEN {
        return Err(AcqError::ShortPacket(bytes.len()));
    }
    if bytes[0] != HEADER {
        return Err(AcqError::BadHeader(bytes[0]));
    }
    let footer = bytes[PACKET_LEN - 1];
    if footer & 0xF0 != 0xC0 {
        return Err(AcqError::BadFooter(footer));
    }
    Ok(())
}

/// Decodes the sequence number and the eight raw channel counts.
pub fn decode_counts(bytes: &[u8]) -> Result<(u8, [AdcCount; CHANNELS]), AcqError> {
    check_framing(bytes)?;
    let mut counts = [AdcCount(0); CHANNELS];
    for (c, chunk) in bytes[2..2 + 3 * CHANNELS].chunks_exact(3).enumerate() {
        counts[c] = AdcCount::from_be_bytes([chunk[0], chunk[1], chunk[2]]);
    }
    Ok((bytes[1], counts))
}

/// Parses one frame. `t` is left at zero; stream readers assign it from
/// the sample index.
pub fn parse_cyton_packet(bytes: &[u8], cfg: &SamplingConfig) -> Result<RawSample, AcqError> {
    let (seq, counts) = decode_counts(bytes)?;
    Ok(RawSample {
        seq,
        t: 0.0,
        volts: counts
            .iter()
            .map(|&c| counts_to_microvolts(c, cfg))
            .collect(),
    })
}

/// Builds a frame with zeroed aux bytes.
pub fn encode_packet(seq: u8, counts: &[AdcCount; CHANNELS], footer: u8) -> [u8; PACKET_LEN] {
    let mut out = [0u8; PACKET_LEN];
    out[0] = HEADER;
    out[1] = seq;
    for (c, count) in counts.iter().enumerate() {
        out[2 + 3 * c..5 + 3 * c].copy_from_slice(&count.to_be_bytes());
    }
    out[PACKET_LEN - 1] = 0xC0 | (footer & 0x0F);
    out
}

/// Reassembles frames from an arbitrary byte stream, resynchronizing on
/// the header byte after corruption.
#[derive(Debug, Default)]
pub struct CytonFramer {
    buf: Vec<u8>,
    skipped: u64,
}

impl CytonFramer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Bytes discarded while hunting for a valid frame boundary.
    pub fn skipped_bytes(&self) -> u64 {
        self.skipped
    }

    pub fn next_frame(&mut self) -> Option<[u8; PACKET_LEN]> {
        loop {
            let start = match self.buf.iter().position(|&b| b == HEADER) {
                Some(p) => p,
                None => {
                    self.skipped += self.buf.len() as u64;
                    self.buf.clear();
                    return None;
                }
            };
            if start > 0 {
                self.skipped += start as u64;
                self.buf.drain(..start);
            }
            if self.buf.len() < PACKET_LEN {
                return None;
            }
            if check_framing(&self.buf[..PACKET_LEN]).is_ok() {
                let mut frame = [0u8; PACKET_LEN];
                frame.copy_from_slice(&self.buf[..PACKET_LEN]);
                self.buf.drain(..PACKET_LEN);
                return Some(frame);
            }
            self.skipped += 1;
            self.buf.drain(..1);
        }
    }
}
