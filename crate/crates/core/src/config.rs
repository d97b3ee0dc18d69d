//! Experiment configuration files.
//!
//! One TOML file describes a whole experiment. Every section is optional and
//! falls back to its defaults; unknown keys anywhere are rejected.
//!
//! ```toml
//! seed = 3
//!
//! [data]
//! n_episodes = 2000
//! distractor_bias = 0.9
//!
//! [train]
//! mode = "mcsi"
//! k = 8
//!
//! [train.schedule]
//! total_steps = 5000
//!
//! [steering]
//! gamma = 1.5
//! head = "flow"
//!
//! [suite]
//! variants = ["origin", "multi", "m4"]
//! episodes_per_variant = 100
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::{OodSpec, SuiteSpec, DEFAULT_GAMMAS, DEFAULT_STEPS};
use crate::error::{Error, Result};
use crate::lang::PerturbationSpec;
use crate::policy::TrainConfig;
use crate::steering::SteeringConfig;
use crate::worldsim::{BiasedDatasetConfig, Intent, DEFAULT_HORIZON};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_episodes: usize,
    pub distractor_bias: f64,
    pub n_distractors: usize,
    pub horizon: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let d = BiasedDatasetConfig::default();
        DataConfig {
            n_episodes: d.n_episodes,
            distractor_bias: d.distractor_bias,
            n_distractors: d.n_distractors,
            horizon: DEFAULT_HORIZON,
        }
    }
}

impl DataConfig {
    pub fn dataset(&self, seed: u64) -> BiasedDatasetConfig {
        BiasedDatasetConfig {
            n_episodes: self.n_episodes,
            distractor_bias: self.distractor_bias,
            n_distractors: self.n_distractors,
            seed,
            horizon: self.horizon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    /// Variant names as accepted by `--suite`, e.g. `origin`, `m4`, `r2`.
    pub variants: Vec<String>,
    pub episodes_per_variant: usize,
    /// Restricts sampled intents; absent means all of them.
    pub intents: Option<Vec<Intent>>,
    pub distractor_bias: f64,
    pub n_distractors: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        let s = SuiteSpec::default();
        SuiteConfig {
            variants: s.variants.iter().map(|v| v.name()).collect(),
            episodes_per_variant: s.episodes_per_variant,
            intents: s.intents,
            distractor_bias: s.distractor_bias,
            n_distractors: s.n_distractors,
        }
    }
}

impl SuiteConfig {
    pub fn spec(&self, steering: &SteeringConfig, seed: u64) -> Result<SuiteSpec> {
        let variants = self
            .variants
            .iter()
            .map(|v| v.parse())
            .collect::<Result<Vec<PerturbationSpec>>>()?;
        let spec = SuiteSpec {
            variants,
            episodes_per_variant: self.episodes_per_variant,
            intents: self.intents.clone(),
            steering: steering.clone(),
            seed,
            distractor_bias: self.distractor_bias,
            n_distractors: self.n_distractors,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub gammas: Vec<f64>,
    pub steps: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            gammas: DEFAULT_GAMMAS.to_vec(),
            steps: DEFAULT_STEPS.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsistencyConfig {
    pub n_states: usize,
    pub k: usize,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        ConsistencyConfig { n_states: 200, k: 8 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed. It overrides any seed set inside a section.
    pub seed: u64,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub steering: SteeringConfig,
    pub suite: SuiteConfig,
    pub sweep: SweepConfig,
    pub ood: OodSpec,
    pub consistency: ConsistencyConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::format("config", e))?;
        let seed = cfg.seed;
        Ok(cfg.with_seed(seed))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format("config", e))
    }

    /// Sets the master seed and propagates it to training, steering and OOD.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.steering.seed = seed;
        self.ood.seed = seed;
        self
    }

    pub fn dataset(&self) -> BiasedDatasetConfig {
        self.data.dataset(self.seed)
    }

    pub fn suite(&self) -> Result<SuiteSpec> {
        self.suite.spec(&self.steering, self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset().validate()?;
        self.train.validate()?;
        self.steering.validate()?;
        self.suite()?;
        self.ood.validate()?;
        if self.sweep.gammas.is_empty() || self.sweep.steps.is_empty() {
            return Err(Error::Config("sweep grids must be nonempty".into()));
        }
        if self.consistency.k < 2 || self.consistency.n_states == 0 {
            return Err(Error::Config("consistency needs k >= 2 and at least one state".into()));
        }
        Ok(())
    }
}
