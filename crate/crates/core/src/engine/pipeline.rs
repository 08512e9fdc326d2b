//! Streaming acquisition → filter → feature path.

use crate::acquisition::{RawSample, SamplingConfig};
use crate::features::{FeatureVector, WindowConfig, Windower};
use crate::signal::{design_cascade, DesignSummary, FilterCascade, FilterDesign};

use super::EngineError;

/// Filters each sample and emits a feature frame every hop.
///
/// Channels that arrive as NaN are replaced by that channel's previous
/// filtered value so one dropped reading does not poison a whole window.
#[derive(Debug, Clone)]
pub struct Pipeline {
    sampling: SamplingConfig,
    cascade: FilterCascade,
    windower: Windower,
    last: Vec<f64>,
    processed: u64,
}

impl Pipeline {
    /// Default filter cascade adapted to the sampling rate and mains
    /// frequency of `sampling`.
    pub fn new(sampling: &SamplingConfig, window: &WindowConfig) -> Result<Self, EngineError> {
        let design = FilterDesign {
            sample_rate: sampling.sample_rate,
            notch_freq: sampling.mains_freq,
            ..FilterDesign::default()
        };
        Self::with_design(sampling, &design, window)
    }

    pub fn with_design(
        sampling: &SamplingConfig,
        design: &FilterDesign,
        window: &WindowConfig,
    ) -> Result<Self, EngineError> {
        sampling.validate()?;
        let cascade = design_cascade(design, sampling.channel_count)?;
        let windower = Windower::new(window, sampling.channel_count, sampling.sample_rate)?;
        Ok(Self {
            sampling: sampling.clone(),
            cascade,
            windower,
            last: vec![0.0; sampling.channel_count],
            processed: 0,
        })
    }

    pub fn sampling(&self) -> &SamplingConfig {
        &self.sampling
    }

    pub fn filter_summary(&self) -> DesignSummary {
        self.cascade.summary()
    }

    pub fn window(&self) -> &WindowConfig {
        self.windower.config()
    }

    pub fn samples_processed(&self) -> u64 {
        self.processed
    }

    /// Per-channel count of NaN readings seen by the filter.
    pub fn nan_counts(&self) -> &[u64] {
        self.cascade.nan_counts()
    }

    pub fn push(&mut self, sample: &RawSample) -> Option<FeatureVector> {
        let mut filtered = self.cascade.filter_frame(sample);
        for (v, last) in filtered.volts.iter_mut().zip(self.last.iter_mut()) {
            if v.is_nan() {
                *v = *last;
            } else {
                *last = *v;
            }
        }
        self.processed += 1;
        self.windower.push(&filtered)
    }
}
