//! Optional TOML settings file; every section and field has a default.

use serde::{Deserialize, Serialize};
use std::path::Path;

use bci_core::acquisition::SynthConfig;
use bci_core::dataset::SplitMode;
use bci_core::engine::SessionPlan;
use bci_core::models::{ModelConfig, SweepConfig};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSettings {
    pub mode: SplitMode,
    pub train_fraction: f64,
    /// Fraction of each session's frames kept by consolidation.
    pub fraction: f64,
}

impl Default for SplitSettings {
    fn default() -> Self {
        Self {
            mode: SplitMode::Random,
            train_fraction: 0.7,
            fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub seed: Option<u64>,
    pub synth: SynthConfig,
    pub plan: SessionPlan,
    pub model: ModelConfig,
    pub split: SplitSettings,
    pub sweep: SweepConfig,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Replaces every component seed with one derived from the run seed,
    /// so a single printed number reproduces the whole run.
    pub fn resolve_seeds(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.synth.seed = derive_seed(seed, purpose::SYNTH);
        self.model.train.seed = seed;
        self.sweep.base_seed = seed;
        self.sweep.train.seed = seed;
    }
}

/// Independent stream seeds derived from the run seed, one per purpose.
pub fn derive_seed(seed: u64, purpose: u64) -> u64 {
    let mut x = seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (x ^ (x >> 31)) >> 1
}

/// Purposes for [`derive_seed`].
pub mod purpose {
    pub const SYNTH: u64 = 1;
    pub const SCHEDULE: u64 = 2;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_files_fill_in_defaults() {
        let s: Settings = toml::from_str("seed = 3\n[plan]\ncontrol_s = 5.0\n[split]\nmode = \"temporal\"\n").unwrap();
        assert_eq!(s.seed, Some(3));
        assert_eq!(s.plan.control_s, 5.0);
        assert_eq!(s.plan.record_s, SessionPlan::default().record_s);
        assert_eq!(s.split.mode, SplitMode::Temporal);
        assert_eq!(s.split.train_fraction, 0.7);
        assert!(toml::from_str::<Settings>("bogus = 1").is_err());
    }

    #[test]
    fn derived_seeds_differ_by_purpose() {
        assert_ne!(derive_seed(5, purpose::SYNTH), derive_seed(5, purpose::SCHEDULE));
        assert_eq!(derive_seed(5, purpose::SYNTH), derive_seed(5, purpose::SYNTH));
        assert!(derive_seed(u64::MAX, 9) < 1 << 63);
    }
}
