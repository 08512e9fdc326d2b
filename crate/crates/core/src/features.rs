//! FFT-magnitude features and canonical EEG band powers.

use rustfft::{num_complex::Complex64, Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::Arc;
use thiserror::Error;

use crate::acquisition::RawSample;
use crate::par;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("invalid window config: {0}")]
    InvalidWindow(String),
    #[error("normalization needs at least one training vector")]
    EmptyTrainingSet,
    #[error("feature shape {got:?} does not match {expected:?}")]
    ShapeMismatch {
        got: (usize, usize),
        expected: (usize, usize),
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowFn {
    Rectangular,
    Hann,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub window_len: usize,
    pub hop: usize,
    pub window_fn: WindowFn,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            window_len: 256,
            hop: 32,
            window_fn: WindowFn::Hann,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if !self.window_len.is_power_of_two() || self.window_len < 2 {
            return Err(FeatureError::InvalidWindow(format!(
                "window_len {} is not a power of two",
                self.window_len
            )));
        }
        if self.hop == 0 || self.hop > self.window_len {
            return Err(FeatureError::InvalidWindow(format!(
                "hop {} outside 1..={}",
                self.hop, self.window_len
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.window_len / 2
    }
}

/// Band edges in Hz, half-open: delta, theta, alpha, beta.
pub const BANDS: [(f64, f64); 4] = [(0.5, 4.0), (4.0, 8.0), (8.0, 13.0), (13.0, 30.0)];

/// One analysis frame: `mags` is row-major `channels × bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    /// Time of the last sample in the window, seconds.
    pub t: f64,
    pub channels: usize,
    pub bins: usize,
    pub mags: Vec<f32>,
    /// Per-channel delta/theta/alpha/beta power.
    pub bands: Vec<[f64; 4]>,
}

impl FeatureVector {
    /// Builds from stored magnitudes, recomputing band powers.
    pub fn from_mags(t: f64, channels: usize, bins: usize, mags: Vec<f32>, sample_rate: f64) -> Self {
        let bands = mags
            .chunks_exact(bins)
            .map(|row| extract_bands(row, sample_rate))
            .collect();
        Self {
            t,
            channels,
            bins,
            mags,
            bands,
        }
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.mags[c * self.bins..(c + 1) * self.bins]
    }
}

/// Cached FFT plan and window coefficients.
#[derive(Clone)]
pub struct SpectrumAnalyzer {
    fft: Arc<dyn Fft<f64>>,
    taper: Vec<f64>,
}

impl std::fmt::Debug for SpectrumAnalyzer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectrumAnalyzer")
            .field("len", &self.taper.len())
            .finish()
    }
}

impl SpectrumAnalyzer {
    pub fn new(window_len: usize, window_fn: WindowFn) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(window_len);
        let taper = match window_fn {
            WindowFn::Rectangular => vec![1.0; window_len],
            // Periodic Hann.
            WindowFn::Hann => (0..window_len)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / window_len as f64).cos())
                .collect(),
        };
        Self { fft, taper }
    }

    pub fn len(&self) -> usize {
        self.taper.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taper.is_empty()
    }

    /// One-sided magnitude spectrum, bins `0..N/2`.
    pub fn magnitudes(&self, window: &[f64]) -> Vec<f64> {
        assert_eq!(window.len(), self.taper.len(), "window length");
        let mut buf: Vec<Complex64> = window
            .iter()
            .zip(&self.taper)
            .map(|(x, w)| Complex64::new(x * w, 0.0))
            .collect();
        self.fft.process(&mut buf);
        buf[..window.len() / 2].iter().map(|c| c.norm()).collect()
    }
}

/// Windowed DFT magnitudes of one full window.
pub fn fft_magnitude(window: &[f64], window_fn: WindowFn) -> Vec<f64> {
    SpectrumAnalyzer::new(window.len(), window_fn).magnitudes(window)
}

/// Sums squared magnitudes over bins whose centre frequency lies in each
/// band. `mags` holds bins `0..N/2` of an `N`-point transform.
pub fn extract_bands<T: Copy + Into<f64>>(mags: &[T], sample_rate: f64) -> [f64; 4] {
    let n = 2 * mags.len();
    let mut out = [0.0; 4];
    for (k, &m) in mags.iter().enumerate() {
        let f = k as f64 * sample_rate / n as f64;
        let m: f64 = m.into();
        for (b, &(lo, hi)) in BANDS.iter().enumerate() {
            if f >= lo && f < hi {
                out[b] += m * m;
            }
        }
    }
    out
}

/// Assembles a feature vector from one window per channel.
pub fn make_feature(
    analyzer: &SpectrumAnalyzer,
    windows: &[Vec<f64>],
    t: f64,
    sample_rate: f64,
) -> FeatureVector {
    let bins = analyzer.len() / 2;
    let mut mags = Vec::with_capacity(windows.len() * bins);
    for w in windows {
        mags.extend(analyzer.magnitudes(w).into_iter().map(|m| m as f32));
    }
    FeatureVector::from_mags(t, windows.len(), bins, mags, sample_rate)
}

/// Per-channel ring buffers emitting a feature every `hop` samples once
/// the first window has filled.
#[derive(Debug, Clone)]
pub struct Windower {
    cfg: WindowConfig,
    sample_rate: f64,
    analyzer: SpectrumAnalyzer,
    rings: Vec<Vec<f64>>,
    head: usize,
    seen: u64,
}

impl Windower {
    pub fn new(cfg: &WindowConfig, channels: usize, sample_rate: f64) -> Result<Self, FeatureError> {
        cfg.validate()?;
        Ok(Self {
            analyzer: SpectrumAnalyzer::new(cfg.window_len, cfg.window_fn),
            cfg: cfg.clone(),
            sample_rate,
            rings: vec![vec![0.0; cfg.window_len]; channels],
            head: 0,
            seen: 0,
        })
    }

    pub fn config(&self) -> &WindowConfig {
        &self.cfg
    }

    pub fn push(&mut self, sample: &RawSample) -> Option<FeatureVector> {
        let n = self.cfg.window_len;
        for (ring, &v) in self.rings.iter_mut().zip(&sample.volts) {
            ring[self.head] = v;
        }
        self.head = (self.head + 1) % n;
        self.seen += 1;
        if self.seen < n as u64 || (self.seen - n as u64) % self.cfg.hop as u64 != 0 {
            return None;
        }
        let windows: Vec<Vec<f64>> = self
            .rings
            .iter()
            .map(|ring| {
                let mut w = Vec::with_capacity(n);
                w.extend_from_slice(&ring[self.head..]);
                w.extend_from_slice(&ring[..self.head]);
                w
            })
            .collect();
        Some(make_feature(&self.analyzer, &windows, sample.t, self.sample_rate))
    }
}

/// Offline equivalent of feeding every sample through a [`Windower`],
/// computed in parallel over window positions.
pub fn batch_features(
    samples: &[RawSample],
    cfg: &WindowConfig,
    sample_rate: f64,
) -> Result<Vec<FeatureVector>, FeatureError> {
    cfg.validate()?;
    let n = cfg.window_len;
    if samples.len() < n {
        return Ok(Vec::new());
    }
    let channels = samples[0].volts.len();
    let analyzer = SpectrumAnalyzer::new(n, cfg.window_fn);
    let count = (samples.len() - n) / cfg.hop + 1;
    Ok(par::map_range(count, |i| {
        let end = i * cfg.hop + n;
        let span = &samples[end - n..end];
        let windows: Vec<Vec<f64>> = (0..channels)
            .map(|c| span.iter().map(|s| s.volts[c]).collect())
            .collect();
        make_feature(&analyzer, &windows, span[n - 1].t, sample_rate)
    }))
}

/// Log-magnitude z-scoring statistics fitted on training vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub channels: usize,
    pub bins: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// False where the training variance was zero; such features are
    /// excluded from flattened inputs and zeroed in matrix inputs.
    pub retained: Vec<bool>,
}

/// Features whose training std falls at or below this are dropped.
const MIN_STD: f64 = 1e-12;

pub fn fit_norm<'a, I>(train: I) -> Result<NormStats, FeatureError>
where
    I: IntoIterator<Item = &'a FeatureVector>,
{
    let mut iter = train.into_iter().peekable();
    let first = iter.peek().ok_or(FeatureError::EmptyTrainingSet)?;
    let (channels, bins) = (first.channels, first.bins);
    let d = channels * bins;
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    let mut n = 0usize;
    let mut logs = Vec::new();
    for fv in iter {
        if (fv.channels, fv.bins) != (channels, bins) {
            return Err(FeatureError::ShapeMismatch {
                got: (fv.channels, fv.bins),
                expected: (channels, bins),
            });
        }
        let row: Vec<f64> = fv.mags.iter().map(|&m| (m as f64).ln_1p()).collect();
        for (s, v) in sum.iter_mut().zip(&row) {
            *s += v;
        }
        logs.push(row);
        n += 1;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    for row in &logs {
        for ((acc, v), m) in sum_sq.iter_mut().zip(row).zip(&mean) {
            *acc += (v - m) * (v - m);
        }
    }
    let std: Vec<f64> = sum_sq.iter().map(|s| (s / n as f64).sqrt()).collect();
    let retained = std.iter().map(|&s| s > MIN_STD).collect();
    Ok(NormStats {
        channels,
        bins,
        mean,
        std,
        retained,
    })
}

/// Normalized features in the same `channels × bins` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedFeatures {
    pub t: f64,
    pub channels: usize,
    pub bins: usize,
    pub values: Vec<f64>,
}

impl NormStats {
    pub fn dropped_count(&self) -> usize {
        self.retained.iter().filter(|r| !**r).count()
    }

    pub fn retained_len(&self) -> usize {
        self.retained.len() - self.dropped_count()
    }

    /// Retained entries of a normalized matrix, for vector classifiers.
    pub fn flatten(&self, nf: &NormalizedFeatures) -> Vec<f64> {
        nf.values
            .iter()
            .zip(&self.retained)
            .filter_map(|(v, keep)| keep.then_some(*v))
            .collect()
    }
}

pub fn apply_norm(fv: &FeatureVector, stats: &NormStats) -> Result<NormalizedFeatures, FeatureError> {
    if (fv.channels, fv.bins) != (stats.channels, stats.bins) {
        return Err(FeatureError::ShapeMismatch {
            got: (fv.channels, fv.bins),
            expected: (stats.channels, stats.bins),
        });
    }
    let values = fv
        .mags
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            if stats.retained[i] {
                ((m as f64).ln_1p() - stats.mean[i]) / stats.std[i]
            } else {
                0.0
            }
        })
        .collect();
    Ok(NormalizedFeatures {
        t: fv.t,
        channels: fv.channels,
        bins: fv.bins,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct O(N²) DFT, independent of the FFT backend.
    fn naive_dft_mag(x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (j, &v) in x.iter().enumerate() {
                    let ang = -2.0 * PI * (k * j % n) as f64 / n as f64;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect()
    }

    fn cosine(bin: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|j| (2.0 * PI * bin * j as f64 / n as f64).cos())
            .collect()
    }

    #[test]
    fn zero_window() {
        let m = fft_magnitude(&[0.0; 256], WindowFn::Hann);
        assert_eq!(m.len(), 128);
        assert!(m.iter().all(|&v| v == 0.0));
        assert_eq!(extract_bands(&m, 250.0), [0.0; 4]);
    }

    #[test]
    fn on_bin_cosine() {
        let m = fft_magnitude(&cosine(10.0, 256), WindowFn::Rectangular);
        assert!((m[10] - 128.0).abs() < 1e-9);
        for (k, &v) in m.iter().enumerate() {
            if k != 10 {
                assert!(v < 1e-9, "bin {k}: {v}");
            }
        }
    }

    #[test]
    fn matches_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..64).map(|_| rng.random::<f64>() - 0.5).collect();
        let fast = fft_magnitude(&x, WindowFn::Rectangular);
        let slow = naive_dft_mag(&x);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn alpha_tone_bands() {
        // Bin 10 at 250 Hz / 256 points is 9.77 Hz.
        let m = fft_magnitude(&cosine(10.0, 256), WindowFn::Rectangular);
        let b = extract_bands(&m, 250.0);
        assert!(b[2] > 0.0);
        for i in [0, 1, 3] {
            assert!(b[i] < 1e-9 * b[2]);
        }
    }

    #[test]
    fn white_noise_band_ordering() {
        // Expected power per band is proportional to its bin count.
        let fs = 250.0;
        let n = 256;
        let counts: Vec<usize> = BANDS
            .iter()
            .map(|&(lo, hi)| {
                (0..n / 2)
                    .filter(|&k| {
                        let f = k as f64 * fs / n as f64;
                        f >= lo && f < hi
                    })
                    .count()
            })
            .collect();
        assert_eq!(counts, vec![4, 4, 5, 17]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut acc = [0.0; 4];
        for _ in 0..100 {
            let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
            let b = extract_bands(&fft_magnitude(&x, WindowFn::Rectangular), fs);
            for i in 0..4 {
                acc[i] += b[i];
            }
        }
        let per_bin: Vec<f64> = (0..4).map(|i| acc[i] / counts[i] as f64).collect();
        let mean = per_bin.iter().sum::<f64>() / 4.0;
        for p in &per_bin {
            assert!((p / mean - 1.0).abs() < 0.2, "{per_bin:?}");
        }
        assert!(acc[3] > acc[2] && acc[2] > acc[0] && acc[2] > acc[1]);
    }

    #[test]
    fn parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 256;
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        // Full spectrum needed for the identity; rebuild the upper half
        // from conjugate symmetry plus the Nyquist bin.
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let m = fft_magnitude(&x, WindowFn::Rectangular);
        let spec: f64 = m[0] * m[0]
            + 2.0 * m[1..].iter().map(|v| v * v).sum::<f64>()
            + buf[n / 2].norm_sqr();
        let time: f64 = x.iter().map(|v| v * v).sum();
        assert!((spec / n as f64 - time).abs() / time < 1e-6);
    }

    #[test]
    fn time_reversal_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..128).map(|_| rng.random::<f64>()).collect();
        // x[(N - n) mod N] has the conjugate spectrum.
        let rev: Vec<f64> = (0..128).map(|i| x[(128 - i) % 128]).collect();
        let a = fft_magnitude(&x, WindowFn::Rectangular);
        let b = fft_magnitude(&rev, WindowFn::Rectangular);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn hann_peak_bin() {
        let fs = 250.0;
        for f in [3.3, 9.0, 10.7, 21.2, 49.9] {
            let x: Vec<f64> = (0..256)
                .map(|j| (2.0 * PI * f * j as f64 / fs).sin())
                .collect();
            let m = fft_magnitude(&x, WindowFn::Hann);
            let argmax = m
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0 as i64;
            let expect = (f * 256.0 / fs).round() as i64;
            assert!((argmax - expect).abs() <= 1, "{f}: {argmax} vs {expect}");
        }
    }

    #[test]
    fn window_config_validation() {
        assert!(WindowConfig::default().validate().is_ok());
        let bad = WindowConfig {
            window_len: 200,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = WindowConfig {
            hop: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    fn samples(n: usize, channels: usize, seed: u64) -> Vec<RawSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| RawSample {
                seq: (i % 256) as u8,
                t: i as f64 / 250.0,
                volts: (0..channels).map(|_| rng.random::<f64>() * 10.0).collect(),
            })
            .collect()
    }

    #[test]
    fn windower_matches_batch_and_timeline() {
        let cfg = WindowConfig::default();
        let s = samples(1000, 3, 2);
        let mut w = Windower::new(&cfg, 3, 250.0).unwrap();
        let streamed: Vec<_> = s.iter().filter_map(|x| w.push(x)).collect();
        let batch = batch_features(&s, &cfg, 250.0).unwrap();
        assert_eq!(streamed, batch);
        assert_eq!(streamed.len(), (1000 - 256) / 32 + 1);
        assert_eq!(streamed[0].t, 255.0 / 250.0);
        for p in streamed.windows(2) {
            assert!((p[1].t - p[0].t - 32.0 / 250.0).abs() < 1e-9);
        }
        assert!(streamed
            .iter()
            .all(|f| f.mags.iter().all(|m| m.is_finite() && *m >= 0.0)));
    }

    #[test]
    fn norm_roundtrip_on_fit_set() {
        let cfg = WindowConfig::default();
        let fvs = batch_features(&samples(3000, 2, 4), &cfg, 250.0).unwrap();
        let stats = fit_norm(&fvs).unwrap();
        let normed: Vec<_> = fvs.iter().map(|f| apply_norm(f, &stats).unwrap()).collect();
        let d = stats.mean.len();
        let n = normed.len() as f64;
        for i in (0..d).filter(|&i| stats.retained[i]) {
            let mean = normed.iter().map(|v| v.values[i]).sum::<f64>() / n;
            let var = normed.iter().map(|v| (v.values[i] - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9, "mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn norm_edge_cases() {
        assert_eq!(
            fit_norm(&Vec::<FeatureVector>::new()).unwrap_err(),
            FeatureError::EmptyTrainingSet
        );
        let stats = NormStats {
            channels: 1,
            bins: 2,
            mean: vec![0.0; 2],
            std: vec![1.0; 2],
            retained: vec![true; 2],
        };
        let fv = FeatureVector::from_mags(0.0, 1, 2, vec![0.0, 0.0], 250.0);
        assert_eq!(apply_norm(&fv, &stats).unwrap().values, vec![0.0, 0.0]);

        // Constant features are dropped.
        let a = FeatureVector::from_mags(0.0, 1, 2, vec![1.0, 2.0], 250.0);
        let b = FeatureVector::from_mags(0.0, 1, 2, vec![1.0, 3.0], 250.0);
        let stats = fit_norm([&a, &b]).unwrap();
        assert_eq!(stats.retained, vec![false, true]);
        let nf = apply_norm(&a, &stats).unwrap();
        assert_eq!(nf.values[0], 0.0);
        assert_eq!(stats.flatten(&nf).len(), 1);
    }

    #[test]
    fn held_out_normalization_is_centred() {
        // Non-overlapping windows so the per-feature means are estimated
        // from independent draws.
        let cfg = WindowConfig {
            hop: 256,
            ..Default::default()
        };
        let a = batch_features(&samples(256 * 2000, 2, 10), &cfg, 250.0).unwrap();
        let b = batch_features(&samples(256 * 2000, 2, 20), &cfg, 250.0).unwrap();
        let stats = fit_norm(&a).unwrap();
        let nb: Vec<_> = b.iter().map(|f| apply_norm(f, &stats).unwrap()).collect();
        for i in 0..stats.mean.len() {
            let mean = nb.iter().map(|v| v.values[i]).sum::<f64>() / nb.len() as f64;
            assert!(mean.abs() < 0.2, "feature {i}: {mean}");
        }
    }
}
