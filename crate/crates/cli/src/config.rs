//! Experiment configuration: a JSON file whose fields can be overridden by
//! command-line flags.

use std::path::{Path, PathBuf};

use anyhow::Context;
use continuity::convergence::TestConfig;
use continuity::odenet::TrainConfig;
use continuity::sindy::SindyConfig;
use continuity::systems::{SamplingSpec, SystemSpec};
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "CONTINUITY_SEED";

/// Analytic-curve settings for the `theory` command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TheoryConfig {
    pub lambda: f64,
    pub dt: f64,
    pub p: u32,
    pub q: u32,
    pub epsilon: f64,
    pub k: f64,
    /// Grid half-span around `dt`, as in the convergence test.
    pub m: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            lambda: -1.0,
            dt: 0.1,
            p: 1,
            q: 1,
            epsilon: 0.0,
            k: 1.0,
            m: 24,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemSpec,
    /// One generated trajectory per initial condition.
    pub initial_conditions: Vec<Vec<f64>>,
    pub sampling: SamplingSpec,
    pub train: TrainConfig,
    pub test: TestConfig,
    pub sindy: SindyConfig,
    pub quit_order: u32,
    pub theory: TheoryConfig,
    pub output_dir: Option<PathBuf>,
    /// Overrides the nested sampling and training seeds when set.
    pub seed: Option<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            system: SystemSpec::harmonic(),
            initial_conditions: vec![vec![1.0, 0.0]],
            sampling: SamplingSpec::new(0.1, 100, 0),
            train: TrainConfig::default(),
            test: TestConfig::default(),
            sindy: SindyConfig::default(),
            quit_order: 4,
            theory: TheoryConfig::default(),
            output_dir: None,
            seed: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Resolves the seed from the flag, the file, then the environment, and
    /// pushes it into the nested configs.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> anyhow::Result<Option<u64>> {
        let env = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .with_context(|| format!("{SEED_ENV} must be an unsigned integer"))?,
            ),
            Err(_) => None,
        };
        let seed = flag.or(self.seed).or(env);
        if let Some(s) = seed {
            self.seed = Some(s);
            self.sampling.seed = s;
            self.train.seed = s;
        }
        Ok(seed)
    }
}
