use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{LogisticConfig, DEFAULT_THRESHOLD};
use crate::demos::check_version;
use crate::error::{Error, Result};
use crate::hmm::{DistanceConfig, EmConfig};

/// Settings shared by every learning step. Two runs with equal settings and
/// equal inputs produce identical models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnConfig {
    /// Activation threshold for initiation classifiers.
    pub theta: f64,
    /// Cut height for complete-linkage policy clustering, in KL-rate units.
    pub tau: f64,
    /// Spacing of interpolated trajectory points used for policy training.
    pub interp_step: f64,
    pub em: EmConfig,
    pub logistic: LogisticConfig,
    pub distance: DistanceConfig,
}

impl Default for LearnConfig {
    fn default() -> Self {
        LearnConfig {
            theta: DEFAULT_THRESHOLD,
            tau: 1.0,
            interp_step: 0.05,
            em: EmConfig::default(),
            logistic: LogisticConfig::default(),
            distance: DistanceConfig::default(),
        }
    }
}

pub const RUN_CONFIG_SCHEMA_VERSION: u32 = 1;

/// Everything besides input files that determines a CLI run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema_version: u32,
    pub scenario: String,
    pub variant: String,
    /// Demonstration noise on position; angles get half of it.
    pub sigma: f64,
    pub seeds: Vec<u64>,
    pub learn: LearnConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: RUN_CONFIG_SCHEMA_VERSION,
            scenario: "pour".into(),
            variant: "base".into(),
            sigma: 0.005,
            seeds: (0..20).collect(),
            learn: LearnConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn to_text(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::parse("run config", e))?;
        check_version(&value, RUN_CONFIG_SCHEMA_VERSION)?;
        serde_json::from_str(text).map_err(|e| Error::parse("run config", e))
    }

    /// SHA-256 over the compact JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}
