//! Run configuration: a single JSON document that pins every knob of a
//! benchmark run, with strict parsing (unknown keys are rejected).

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::completion::CompletorParams;
use crate::losses::LossWeights;
use crate::policies::{EpisodeBudget, PolicyKind};
use crate::world::WorldParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Full benchmark run configuration. Serialized as JSON; every field has a
/// default so partial files work, but unknown keys fail loudly.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seeds; the benchmark repeats per seed.
    pub seeds: Vec<u64>,
    pub world: WorldParams,
    /// Policies to compare. The random policy always runs first when present
    /// because its data fits the completor that seeds the
    /// uncertainty-guided policy.
    pub policies: Vec<PolicyKind>,
    pub budget: EpisodeBudget,
    pub weights: LossWeights,
    /// Starting point (and loss weights) for the completor grid search.
    pub completor_init: CompletorParams,
    pub out_dir: String,
    /// Training scenes per master seed.
    pub train_scenes: usize,
    /// Held-out scenes in the shared evaluation set.
    pub test_scenes: usize,
    pub test_triplets_per_scene: usize,
    /// Square frame edge length in pixels.
    pub frame_size: usize,
    /// Sparse depth points sampled per frame.
    pub sparse_count: usize,
    /// Step stride between retained fitting triplets within an episode.
    pub fit_stride: usize,
    /// Cap on completor-fitting samples per (policy, seed).
    pub fit_samples_max: usize,
    /// Worker thread count; results are identical for any value.
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            world: WorldParams::default(),
            policies: PolicyKind::all().to_vec(),
            budget: EpisodeBudget::default(),
            weights: LossWeights::default(),
            completor_init: CompletorParams::default(),
            out_dir: "out".into(),
            train_scenes: 5,
            test_scenes: 3,
            test_triplets_per_scene: 8,
            frame_size: 128,
            sparse_count: 160,
            fit_stride: 25,
            fit_samples_max: 24,
            jobs: 1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.seeds.is_empty() {
            return Err("at least one master seed is required".into());
        }
        if self.policies.is_empty() {
            return Err("at least one policy is required".into());
        }
        if self.train_scenes == 0 || self.test_scenes == 0 || self.test_triplets_per_scene == 0 {
            return Err("scene and triplet counts must be positive".into());
        }
        if self.frame_size < 16 {
            return Err("frame_size must be at least 16".into());
        }
        if self.sparse_count == 0 {
            return Err("sparse_count must be positive".into());
        }
        if self.budget.max_steps < 3 {
            return Err("budget must allow at least 3 steps".into());
        }
        self.world.validate().map_err(|e| e.to_string())?;
        self.weights.validate().map_err(|e| e.to_string())?;
        self.completor_init.validate().map_err(|e| e.to_string())?;
        Ok(())
    }

    /// FNV-1a hash of the canonical JSON form; stamped into datasets and
    /// reports so mixed-provenance artifacts are detectable.
    /// Hash of the result-affecting configuration. Execution knobs that
    /// cannot change the results (thread count, output directory) are
    /// excluded so equivalent runs produce comparable reports.
    pub fn hash(&self) -> u64 {
        let mut canon = self.clone();
        canon.jobs = 0;
        canon.out_dir = String::new();
        let json = serde_json::to_string(&canon).expect("config serializes");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in json.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: RunConfig =
            serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate().map_err(ConfigError::Invalid)?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("config serializes"))?;
        Ok(())
    }
}
