//! Run configuration read from TOML, with command-line overrides applied
//! on top and the resolved result written next to every run's outputs.

use std::fs;
use std::path::{Path, PathBuf};

use bisgan_core::gqm::GqmConfig;
use bisgan_core::sigdata::DEFAULT_RESOLUTION;
use bisgan_core::spoofbench::{VerifierConfig, VerifierPreset};
use bisgan_core::training::Direction;
use bisgan_core::{DiscriminatorConfig, GeneratorConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Layout;

pub const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub writers: usize,
    pub genuine_per_writer: usize,
    pub forged_per_writer: usize,
    pub resolution: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            writers: 20,
            genuine_per_writer: 8,
            forged_per_writer: 8,
            resolution: DEFAULT_RESOLUTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub layout: Layout,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            layout: Layout::Canonical,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub count: usize,
    pub direction: Direction,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            count: 10,
            direction: Direction::AToB,
        }
    }
}

fn default_verifiers() -> Vec<VerifierConfig> {
    VerifierPreset::ALL.iter().map(|&p| VerifierConfig::new(p, 0)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, also fixes the training and verifier seeds.
    pub seed: Option<u64>,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
    pub generate: GenerateConfig,
    pub gqm: GqmConfig,
    pub verifiers: Vec<VerifierConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            train: TrainConfig::default(),
            generate: GenerateConfig::default(),
            gqm: GqmConfig::default(),
            verifiers: default_verifiers(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config {
            path: origin.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// The file at `path`, or defaults when absent.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Sets the global seed and every per-component seed derived from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.train.seed = seed;
        for v in &mut self.verifiers {
            v.seed = seed;
        }
    }

    /// The global seed, 0 when unset.
    pub fn global_seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Fails when a value has no TOML encoding, e.g. a seed above `i64::MAX`.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Usage(format!("config cannot be written as TOML: {e}")))
    }

    /// Writes the resolved config into `dir` and returns its path.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn digest(&self) -> [u8; 32] {
        bisgan_core::training::config_digest(&self.generator, &self.discriminator, &self.train)
    }
}
