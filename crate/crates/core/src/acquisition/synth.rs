//! Seeded synthetic EEG.
//!
//! Each channel is the sum of 1/f-shaped noise (octave-spaced white-noise
//! generators), slow drift, mains pickup and a mu-band oscillation. The mu
//! amplitude over one hemisphere drops by `mu_depth` when the label names
//! the contralateral side. The RNG is consumed identically for every
//! label, so the label only ever changes the mu gain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

use super::{AcqError, MontageConfig, RawSample, SamplingConfig, FULL_SCALE_UV};
use crate::dataset::ClassLabel;

const OCTAVES: usize = 8;
const MU_COMPONENTS: usize = 3;
const DRIFT_FREQS: [f64; 2] = [0.07, 0.23];
/// Time constant of the mu gain response to a label change, seconds.
const MU_GAIN_TAU: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    /// RMS of the 1/f noise, µV.
    pub noise_amplitude: f64,
    /// Mu rhythm band edges, Hz.
    pub mu_band: (f64, f64),
    /// Fractional mu attenuation on the hemisphere contralateral to the label.
    pub mu_depth: f64,
    /// Peak amplitude of the unattenuated mu rhythm, µV.
    pub mu_amplitude: f64,
    /// Amplitude of the mains sinusoid, µV.
    pub mains_leak: f64,
    /// Amplitude of the sub-0.5 Hz wander, µV.
    pub drift_amplitude: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            noise_amplitude: 4.0,
            mu_band: (8.0, 13.0),
            mu_depth: 0.8,
            mu_amplitude: 12.0,
            mains_leak: 15.0,
            drift_amplitude: 25.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), AcqError> {
        if !(0.0..=1.0).contains(&self.mu_depth) {
            return Err(AcqError::InvalidConfig(format!(
                "mu_depth {} outside [0, 1]",
                self.mu_depth
            )));
        }
        let amps = [
            self.noise_amplitude,
            self.mu_amplitude,
            self.mains_leak,
            self.drift_amplitude,
        ];
        if amps.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return Err(AcqError::InvalidConfig("amplitudes must be >= 0".into()));
        }
        let (lo, hi) = self.mu_band;
        if !(lo > 0.0 && hi > lo) {
            return Err(AcqError::InvalidConfig(format!("bad mu band {lo}..{hi}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hemisphere {
    Left,
    Right,
    Midline,
}

impl Hemisphere {
    /// Odd 10-20 indices sit over the left hemisphere, even over the right,
    /// `z` on the midline.
    pub fn of(position: &str) -> Self {
        let digits: String = position
            .chars()
            .rev()
            .take_while(|c| c.is_ascii_digit())
            .collect();
        match digits.chars().next().and_then(|c| c.to_digit(10)) {
            Some(d) if d % 2 == 1 => Hemisphere::Left,
            Some(_) => Hemisphere::Right,
            None => Hemisphere::Midline,
        }
    }
}

/// Piecewise-constant label timeline covering `[segments[0].0, end)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSchedule {
    segments: Vec<(f64, ClassLabel)>,
    end: f64,
}

impl LabelSchedule {
    /// `segments` are `(start, label)` pairs; they are sorted by start.
    pub fn new(mut segments: Vec<(f64, ClassLabel)>, end: f64) -> Self {
        segments.sort_by(|a, b| a.0.total_cmp(&b.0));
        Self { segments, end }
    }

    pub fn constant(label: ClassLabel, duration: f64) -> Self {
        Self::new(vec![(0.0, label)], duration)
    }

    /// Cycles through `labels`, holding each for `block` seconds.
    pub fn cycle(labels: &[ClassLabel], block: f64, duration: f64) -> Self {
        let mut segments = Vec::new();
        let mut t = 0.0;
        let mut i = 0;
        while t < duration && !labels.is_empty() {
            segments.push((t, labels[i % labels.len()]));
            i += 1;
            t = i as f64 * block;
        }
        Self::new(segments, duration)
    }

    /// Random blocks with lengths uniform in `[min_block, max_block]`; each
    /// block's label differs from the previous one.
    pub fn random(labels: &[ClassLabel], min_block: f64, max_block: f64, duration: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut segments = Vec::new();
        let mut t = 0.0;
        let mut prev: Option<usize> = None;
        while t < duration && !labels.is_empty() {
            let mut i = rng.random_range(0..labels.len());
            if labels.len() > 1 && Some(i) == prev {
                i = (i + 1 + rng.random_range(0..labels.len() - 1)) % labels.len();
            }
            segments.push((t, labels[i]));
            prev = Some(i);
            t += rng.random_range(min_block..=max_block.max(min_block));
        }
        Self::new(segments, duration)
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn segments(&self) -> &[(f64, ClassLabel)] {
        &self.segments
    }

    pub fn label_at(&self, t: f64) -> Option<ClassLabel> {
        if t >= self.end {
            return None;
        }
        let idx = self.segments.partition_point(|(start, _)| *start <= t);
        idx.checked_sub(1).map(|i| self.segments[i].1)
    }
}

#[derive(Debug, Clone)]
struct ChannelState {
    hemisphere: Hemisphere,
    octaves: [f64; OCTAVES],
    drift_phase: [f64; 2],
    mains_phase: f64,
    mu_phase: [f64; MU_COMPONENTS],
    mu_gain: f64,
}

/// Incremental synthetic source; the label for each sample is supplied by
/// the caller so it can follow a live key state.
#[derive(Debug, Clone)]
pub struct SynthSource {
    cfg: SamplingConfig,
    scfg: SynthConfig,
    rng: ChaCha8Rng,
    channels: Vec<ChannelState>,
    mu_freqs: [f64; MU_COMPONENTS],
    gain_alpha: f64,
    index: u64,
}

impl SynthSource {
    pub fn new(
        cfg: &SamplingConfig,
        montage: &MontageConfig,
        scfg: &SynthConfig,
    ) -> Result<Self, AcqError> {
        cfg.validate()?;
        scfg.validate()?;
        montage.validate(cfg.channel_count)?;
        let mut rng = ChaCha8Rng::seed_from_u64(scfg.seed);
        let channels = montage
            .positions
            .iter()
            .map(|p| ChannelState {
                hemisphere: Hemisphere::of(p),
                octaves: [0.0; OCTAVES],
                drift_phase: [rng.random::<f64>() * TAU, rng.random::<f64>() * TAU],
                mains_phase: rng.random::<f64>() * TAU,
                mu_phase: [
                    rng.random::<f64>() * TAU,
                    rng.random::<f64>() * TAU,
                    rng.random::<f64>() * TAU,
                ],
                mu_gain: 1.0,
            })
            .collect();
        let (lo, hi) = scfg.mu_band;
        let mu_freqs = [0.2, 0.5, 0.8].map(|f| lo + f * (hi - lo));
        let gain_alpha = 1.0 - (-1.0 / (MU_GAIN_TAU * cfg.sample_rate)).exp();
        Ok(Self {
            cfg: cfg.clone(),
            scfg: scfg.clone(),
            rng,
            channels,
            mu_freqs,
            gain_alpha,
            index: 0,
        })
    }

    pub fn sampling(&self) -> &SamplingConfig {
        &self.cfg
    }

    pub fn config(&self) -> &SynthConfig {
        &self.scfg
    }

    /// Time of the next sample to be produced.
    pub fn next_t(&self) -> f64 {
        self.index as f64 / self.cfg.sample_rate
    }

    pub fn next_sample(&mut self, label: ClassLabel) -> RawSample {
        let dt = self.cfg.dt();
        let t = self.next_t();
        let noise_scale = self.scfg.noise_amplitude / 3.0_f64.sqrt();
        let mu_amp = self.scfg.mu_amplitude / (MU_COMPONENTS as f64).sqrt();
        let depth = self.scfg.mu_depth;
        let mains_step = TAU * self.cfg.mains_freq * dt;
        let index = self.index;

        let mut volts = Vec::with_capacity(self.channels.len());
        for ch in &mut self.channels {
            let white = 2.0 * self.rng.random::<f64>() - 1.0;
            for (j, oct) in ch.octaves.iter_mut().enumerate() {
                if index % (1u64 << j) == 0 {
                    *oct = 2.0 * self.rng.random::<f64>() - 1.0;
                }
            }
            let pink = white + ch.octaves.iter().sum::<f64>();

            let attenuated = match ch.hemisphere {
                Hemisphere::Left => label.includes_right(),
                Hemisphere::Right => label.includes_left(),
                Hemisphere::Midline => false,
            };
            let target = if attenuated { 1.0 - depth } else { 1.0 };
            ch.mu_gain += (target - ch.mu_gain) * self.gain_alpha;

            let mut mu = 0.0;
            for (phase, f) in ch.mu_phase.iter_mut().zip(self.mu_freqs) {
                mu += phase.sin();
                let jitter = 2.0 * self.rng.random::<f64>() - 1.0;
                *phase = (*phase + TAU * f * dt + 0.05 * jitter) % TAU;
            }

            let drift: f64 = ch
                .drift_phase
                .iter()
                .zip(DRIFT_FREQS)
                .map(|(p, f)| (p + TAU * f * t).sin())
                .sum::<f64>()
                * (self.scfg.drift_amplitude / 2.0);
            let mains = self.scfg.mains_leak * ch.mains_phase.sin();
            ch.mains_phase = (ch.mains_phase + mains_step) % TAU;

            let v = noise_scale * pink + drift + mains + ch.mu_gain * mu_amp * mu;
            volts.push(v.clamp(-FULL_SCALE_UV * 0.99, FULL_SCALE_UV * 0.99));
        }
        self.index += 1;
        RawSample {
            seq: (index % 256) as u8,
            t,
            volts,
        }
    }
}

/// Generates `duration` seconds of synthetic EEG following `schedule`.
pub fn synth_stream(
    cfg: &SamplingConfig,
    montage: &MontageConfig,
    scfg: &SynthConfig,
    schedule: &LabelSchedule,
    duration: f64,
) -> Result<Vec<RawSample>, AcqError> {
    let mut src = SynthSource::new(cfg, montage, scfg)?;
    let n = (duration * cfg.sample_rate).round() as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let t = src.next_t();
        let label = schedule.label_at(t).ok_or(AcqError::ScheduleGap(t))?;
        out.push(src.next_sample(label));
    }
    Ok(out)
}
