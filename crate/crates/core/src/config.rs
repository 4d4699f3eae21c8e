//! Single-file TOML run configuration with a versioned, closed key schema.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{NormalizationSpec, Split};
use crate::discriminator::DiscriminatorConfig;
use crate::error::{config_err, Error, Result};
use crate::generator::GeneratorConfig;
use crate::losses::{LossWeights, PerceptualConfig};
use crate::training::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: PathBuf,
    #[serde(default = "default_train_split")]
    pub train_split: Split,
    #[serde(default = "default_val_split")]
    pub val_split: Split,
    #[serde(default = "NormalizationSpec::sar_db")]
    pub sar_norm: NormalizationSpec,
    #[serde(default = "NormalizationSpec::optical")]
    pub optical_norm: NormalizationSpec,
}

fn default_train_split() -> Split {
    Split::Train
}

fn default_val_split() -> Split {
    Split::Val
}

impl DataConfig {
    pub fn new(manifest: impl Into<PathBuf>) -> Self {
        DataConfig {
            manifest: manifest.into(),
            train_split: Split::Train,
            val_split: Split::Val,
            sar_norm: NormalizationSpec::sar_db(),
            optical_norm: NormalizationSpec::optical(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub discriminator: DiscriminatorConfig,
    #[serde(default)]
    pub losses: LossWeights,
    #[serde(default)]
    pub perceptual: PerceptualConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn new(manifest: impl Into<PathBuf>) -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            losses: LossWeights::default(),
            perceptual: PerceptualConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::new(manifest),
        }
    }

    /// Reduced widths for desk-scale runs.
    pub fn tiny(manifest: impl Into<PathBuf>) -> Self {
        RunConfig {
            generator: GeneratorConfig::tiny(),
            discriminator: DiscriminatorConfig::tiny(),
            perceptual: PerceptualConfig::tiny(),
            ..RunConfig::new(manifest)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(config_err!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        self.generator.validate()?;
        self.discriminator.validate(&self.generator)?;
        self.losses.validate()?;
        self.train.validate()?;
        self.data.sar_norm.validate()?;
        self.data.optical_norm.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text).map_err(|e| match e {
            Error::TomlDe(inner) => config_err!("{}: {inner}", path.display()),
            other => other,
        })
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::tiny("corpus/manifest.jsonl");
        cfg.train.ablation.no_fusionatt = true;
        cfg.losses.lambda_adv = 0.5;
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn minimal_file_gets_defaults() {
        let cfg = RunConfig::from_toml("schema_version = 1\n[data]\nmanifest = \"m.jsonl\"\n").unwrap();
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.losses, LossWeights::default());
    }

    #[test]
    fn unknown_keys_and_versions_are_rejected() {
        let typo = "schema_version = 1\n[data]\nmanifest = \"m\"\n[train.ablation]\nno_fusion_att = true\n";
        assert!(RunConfig::from_toml(typo).unwrap_err().is_validation());
        let old = "schema_version = 0\n[data]\nmanifest = \"m\"\n";
        assert!(RunConfig::from_toml(old).unwrap_err().is_validation());
    }
}
