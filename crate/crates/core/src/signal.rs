//! Streaming IIR filtering: high-pass, low-pass and mains notch as a cascade
//! of second-order sections.
//!
//! Each section runs the difference equation
//! `y[n] = b0·x[n] + b1·x[n-1] + b2·x[n-2] - a1·y[n-1] - a2·y[n-2]`
//! in transposed direct form II; three sections expand to a sixth-order
//! recursion overall.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use thiserror::Error;

use crate::acquisition::RawSample;

#[derive(Debug, Error, PartialEq)]
pub enum SignalError {
    #[error("invalid band: {0}")]
    InvalidBand(String),
    #[error("unstable section: a1 = {a1}, a2 = {a2}")]
    UnstableDesign { a1: f64, a2: f64 },
}

/// Cutoffs and notch parameters of the cascade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDesign {
    pub sample_rate: f64,
    pub hp_cutoff: f64,
    pub lp_cutoff: f64,
    pub notch_freq: f64,
    pub notch_q: f64,
}

impl Default for FilterDesign {
    fn default() -> Self {
        Self {
            sample_rate: 250.0,
            hp_cutoff: 0.5,
            lp_cutoff: 45.0,
            notch_freq: 50.0,
            notch_q: 30.0,
        }
    }
}

/// Design parameters plus the resulting coefficients, as stored in
/// session headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSummary {
    pub design: FilterDesign,
    /// `[b0, b1, b2, a1, a2]` per section, in application order.
    pub coefficients: Vec<[f64; 5]>,
}

/// One biquad's coefficients (`a0` normalized to 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterStage {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl FilterStage {
    pub const IDENTITY: FilterStage = FilterStage {
        b: [1.0, 0.0, 0.0],
        a: [0.0, 0.0],
    };

    fn normalized(b: [f64; 3], a0: f64, a1: f64, a2: f64) -> Self {
        Self {
            b: [b[0] / a0, b[1] / a0, b[2] / a0],
            a: [a1 / a0, a2 / a0],
        }
    }

    pub fn lowpass(fs: f64, fc: f64, q: f64) -> Self {
        let (c, alpha) = prewarp(fs, fc, q);
        let k = (1.0 - c) / 2.0;
        Self::normalized([k, 1.0 - c, k], 1.0 + alpha, -2.0 * c, 1.0 - alpha)
    }

    pub fn highpass(fs: f64, fc: f64, q: f64) -> Self {
        let (c, alpha) = prewarp(fs, fc, q);
        let k = (1.0 + c) / 2.0;
        Self::normalized([k, -(1.0 + c), k], 1.0 + alpha, -2.0 * c, 1.0 - alpha)
    }

    pub fn notch(fs: f64, f0: f64, q: f64) -> Self {
        let (c, alpha) = prewarp(fs, f0, q);
        Self::normalized([1.0, -2.0 * c, 1.0], 1.0 + alpha, -2.0 * c, 1.0 - alpha)
    }

    /// Both poles strictly inside the unit circle (stability triangle).
    pub fn is_stable(&self) -> bool {
        let [a1, a2] = self.a;
        a1.is_finite() && a2.is_finite() && a2.abs() < 1.0 && a1.abs() < 1.0 + a2
    }

    /// `H(z)` evaluated on the unit circle at `f` Hz.
    pub fn response(&self, f: f64, fs: f64) -> Complex64 {
        let zi = Complex64::from_polar(1.0, -2.0 * PI * f / fs);
        let zi2 = zi * zi;
        let num = self.b[0] + self.b[1] * zi + self.b[2] * zi2;
        let den = 1.0 + self.a[0] * zi + self.a[1] * zi2;
        num / den
    }

    #[inline]
    fn step(&self, state: &mut [f64; 2], x: f64) -> f64 {
        let y = self.b[0] * x + state[0];
        state[0] = self.b[1] * x - self.a[0] * y + state[1];
        state[1] = self.b[2] * x - self.a[1] * y;
        y
    }
}

fn prewarp(fs: f64, f: f64, q: f64) -> (f64, f64) {
    let w0 = 2.0 * PI * f / fs;
    let (s, c) = w0.sin_cos();
    (c, s / (2.0 * q))
}

/// A fixed sequence of sections with independent state per channel.
#[derive(Debug, Clone)]
pub struct FilterCascade {
    stages: Vec<FilterStage>,
    sample_rate: f64,
    design: Option<FilterDesign>,
    /// `state[channel][stage]`
    state: Vec<Vec<[f64; 2]>>,
    nan_counts: Vec<u64>,
}

/// Designs the high-pass → low-pass → notch cascade.
pub fn design_cascade(
    design: &FilterDesign,
    channel_count: usize,
) -> Result<FilterCascade, SignalError> {
    let FilterDesign {
        sample_rate: fs,
        hp_cutoff,
        lp_cutoff,
        notch_freq,
        notch_q,
    } = *design;
    let nyq = fs / 2.0;
    if !(fs > 0.0 && hp_cutoff > 0.0 && hp_cutoff < lp_cutoff && lp_cutoff < nyq) {
        return Err(SignalError::InvalidBand(format!(
            "need 0 < hp ({hp_cutoff}) < lp ({lp_cutoff}) < fs/2 ({nyq})"
        )));
    }
    if !(notch_freq > 0.0 && notch_freq < nyq) {
        return Err(SignalError::InvalidBand(format!(
            "notch {notch_freq} outside (0, {nyq})"
        )));
    }
    if !(notch_q > 0.0) {
        return Err(SignalError::InvalidBand(format!("notch Q {notch_q} <= 0")));
    }
    let stages = vec![
        FilterStage::highpass(fs, hp_cutoff, FRAC_1_SQRT_2),
        FilterStage::lowpass(fs, lp_cutoff, FRAC_1_SQRT_2),
        FilterStage::notch(fs, notch_freq, notch_q),
    ];
    let mut c = FilterCascade::from_stages(stages, fs, channel_count)?;
    c.design = Some(design.clone());
    Ok(c)
}

impl FilterCascade {
    pub fn from_stages(
        stages: Vec<FilterStage>,
        sample_rate: f64,
        channel_count: usize,
    ) -> Result<Self, SignalError> {
        if let Some(bad) = stages.iter().find(|s| !s.is_stable()) {
            return Err(SignalError::UnstableDesign {
                a1: bad.a[0],
                a2: bad.a[1],
            });
        }
        let n = stages.len();
        Ok(Self {
            stages,
            sample_rate,
            design: None,
            state: vec![vec![[0.0; 2]; n]; channel_count],
            nan_counts: vec![0; channel_count],
        })
    }

    pub fn stages(&self) -> &[FilterStage] {
        &self.stages
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn channel_count(&self) -> usize {
        self.state.len()
    }

    pub fn summary(&self) -> DesignSummary {
        DesignSummary {
            design: self.design.clone().unwrap_or(FilterDesign {
                sample_rate: self.sample_rate,
                hp_cutoff: f64::NAN,
                lp_cutoff: f64::NAN,
                notch_freq: f64::NAN,
                notch_q: f64::NAN,
            }),
            coefficients: self
                .stages
                .iter()
                .map(|s| [s.b[0], s.b[1], s.b[2], s.a[0], s.a[1]])
                .collect(),
        }
    }

    /// Zeroes every delay register.
    pub fn reset(&mut self) {
        for ch in &mut self.state {
            ch.iter_mut().for_each(|s| *s = [0.0; 2]);
        }
    }

    /// Count of NaN inputs seen per channel.
    pub fn nan_counts(&self) -> &[u64] {
        &self.nan_counts
    }

    /// Runs one sample of one channel through every section. A NaN input
    /// yields NaN and leaves that channel's state untouched.
    ///
    /// Panics if `channel` is out of range.
    pub fn filter_step(&mut self, channel: usize, x: f64) -> f64 {
        if x.is_nan() {
            self.nan_counts[channel] += 1;
            return f64::NAN;
        }
        let state = &mut self.state[channel];
        self.stages
            .iter()
            .zip(state.iter_mut())
            .fold(x, |acc, (stage, st)| stage.step(st, acc))
    }

    pub fn filter_frame(&mut self, sample: &RawSample) -> RawSample {
        let volts = sample
            .volts
            .iter()
            .enumerate()
            .map(|(c, &v)| self.filter_step(c, v))
            .collect();
        RawSample {
            seq: sample.seq,
            t: sample.t,
            volts,
        }
    }

    /// Analytic cascade response at `f` Hz.
    pub fn response(&self, f: f64) -> Complex64 {
        self.stages
            .iter()
            .map(|s| s.response(f, self.sample_rate))
            .product()
    }

    /// First `n` samples of the impulse response from zero state. Does not
    /// disturb the streaming state.
    pub fn impulse_response(&self, n: usize) -> Vec<f64> {
        let mut state = vec![[0.0; 2]; self.stages.len()];
        (0..n)
            .map(|i| {
                let x = if i == 0 { 1.0 } else { 0.0 };
                self.stages
                    .iter()
                    .zip(state.iter_mut())
                    .fold(x, |acc, (stage, st)| stage.step(st, acc))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn default_cascade(ch: usize) -> FilterCascade {
        design_cascade(&FilterDesign::default(), ch).unwrap()
    }

    #[test]
    fn notch_and_passband() {
        let c = default_cascade(1);
        assert!(c.response(50.0).norm() <= 0.032);
        let g10 = c.response(10.0).norm();
        assert!((0.71..=1.0).contains(&g10), "{g10}");
        assert!(c.response(0.0).norm() < 1e-12);
    }

    #[test]
    fn invalid_bands() {
        let d = FilterDesign {
            hp_cutoff: 45.0,
            lp_cutoff: 45.0,
            ..Default::default()
        };
        assert!(matches!(
            design_cascade(&d, 1),
            Err(SignalError::InvalidBand(_))
        ));
        let d = FilterDesign {
            notch_freq: 130.0,
            ..Default::default()
        };
        assert!(design_cascade(&d, 1).is_err());
        let d = FilterDesign {
            lp_cutoff: 125.0,
            ..Default::default()
        };
        assert!(design_cascade(&d, 1).is_err());
    }

    #[test]
    fn unstable_rejected() {
        let s = FilterStage {
            b: [1.0, 0.0, 0.0],
            a: [0.0, -1.01],
        };
        assert!(matches!(
            FilterCascade::from_stages(vec![s], 250.0, 1),
            Err(SignalError::UnstableDesign { .. })
        ));
    }

    #[test]
    fn zero_in_zero_out_and_identity() {
        let mut c = default_cascade(2);
        assert_eq!(c.filter_step(0, 0.0), 0.0);
        let mut id = FilterCascade::from_stages(vec![FilterStage::IDENTITY], 250.0, 1).unwrap();
        assert_eq!(id.filter_step(0, 1.0), 1.0);
        assert_eq!(id.filter_step(0, 0.0), 0.0);
        assert_eq!(id.filter_step(0, -3.5), -3.5);
    }

    #[test]
    fn dc_is_removed() {
        let mut c = default_cascade(1);
        let mut y = 0.0;
        for _ in 0..2500 {
            y = c.filter_step(0, 100.0);
        }
        assert!(y.abs() < 1.0, "{y}");
    }

    #[test]
    fn nan_isolated_to_channel_and_sample() {
        let mut c = default_cascade(2);
        for _ in 0..10 {
            c.filter_frame(&RawSample {
                seq: 0,
                t: 0.0,
                volts: vec![1.0, 1.0],
            });
        }
        let mut reference = c.clone();
        let out = c.filter_frame(&RawSample {
            seq: 1,
            t: 0.1,
            volts: vec![f64::NAN, 2.0],
        });
        assert!(out.volts[0].is_nan());
        assert!(out.volts[1].is_finite());
        assert_eq!(c.nan_counts(), &[1, 0]);
        // Next sample on channel 0 matches a run that never saw the NaN.
        let a = c.filter_step(0, 3.0);
        let b = reference.filter_step(0, 3.0);
        assert_eq!(a, b);
    }

    #[test]
    fn frame_preserves_metadata() {
        let mut c = default_cascade(3);
        let s = RawSample {
            seq: 42,
            t: 1.25,
            volts: vec![1.0, 2.0, 3.0],
        };
        let out = c.filter_frame(&s);
        assert_eq!(out.seq, 42);
        assert_eq!(out.t, 1.25);
        assert_eq!(out.volts.len(), 3);
    }

    #[test]
    fn impulse_decays() {
        let h = default_cascade(1).impulse_response(10_000);
        assert!(h[9_000..].iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn time_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..2000).map(|_| rng.random::<f64>() - 0.5).collect();
        let k = 37;
        let mut a = default_cascade(1);
        let ya: Vec<f64> = x.iter().map(|&v| a.filter_step(0, v)).collect();
        let mut b = default_cascade(1);
        let shifted: Vec<f64> = std::iter::repeat_n(0.0, k).chain(x.iter().copied()).collect();
        let yb: Vec<f64> = shifted.iter().map(|&v| b.filter_step(0, v)).collect();
        for i in 0..x.len() {
            assert!((ya[i] - yb[i + k]).abs() <= 1e-12 * (1.0 + ya[i].abs()));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn linearity(seed in any::<u64>(), alpha in -5.0f64..5.0, beta in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x1: Vec<f64> = (0..1000).map(|_| 100.0 * (rng.random::<f64>() - 0.5)).collect();
            let x2: Vec<f64> = (0..1000).map(|_| 100.0 * (rng.random::<f64>() - 0.5)).collect();
            let run = |x: &[f64]| {
                let mut c = default_cascade(1);
                x.iter().map(|&v| c.filter_step(0, v)).collect::<Vec<_>>()
            };
            let mix: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| alpha * a + beta * b).collect();
            let (y1, y2, ym) = (run(&x1), run(&x2), run(&mix));
            let scale = y1.iter().chain(&y2).fold(0.0f64, |m, v| m.max(v.abs())) * (alpha.abs() + beta.abs()) + 1e-12;
            for i in 0..ym.len() {
                let expect = alpha * y1[i] + beta * y2[i];
                prop_assert!((ym[i] - expect).abs() <= 1e-9 * scale);
            }
        }
    }
}
