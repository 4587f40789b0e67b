//! Run configuration: one strict JSON document, overridden by flags.

use std::path::{Path, PathBuf};

use cavl_core::data::{generate_synthetic_corpus, read_corpus, GeneratorSpec, SyntheticCorpus};
use cavl_core::error::{Error, Result};
use cavl_core::model::ModelConfig;
use cavl_core::training::{FinetuneConfig, PretrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Regenerate the synthetic corpus from the run seed.
    Generator(GeneratorSpec),
    /// Read a corpus directory written by `gen-data`.
    Corpus { dir: PathBuf },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Generator(GeneratorSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    /// Not stored in checkpoints, so runs that differ only here stay
    /// byte-identical.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if let DataConfig::Generator(g) = &self.data {
            g.validate(&self.model)?;
        }
        self.pretrain.validate()?;
        self.finetune.validate()
    }

    /// The configuration as recorded inside checkpoints.
    pub fn to_record(&self) -> serde_json::Value {
        let mut c = self.clone();
        c.output_dir = None;
        serde_json::to_value(c).expect("configuration serialises")
    }

    pub fn corpus(&self) -> Result<SyntheticCorpus> {
        match &self.data {
            DataConfig::Generator(g) => generate_synthetic_corpus(self.seed, g, &self.model),
            DataConfig::Corpus { dir } => read_corpus(dir),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"seed": 1, "sede": 2}"#).is_err());
        assert!(RunConfig::from_json(r#"{"pretrain": {"epoch": 2}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"data": {"generator": {"n_class": 2}}}"#).is_err());
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c = RunConfig::from_json(r#"{"seed": 3, "pretrain": {"epochs": 2}}"#).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.pretrain.epochs, 2);
        assert_eq!(c.pretrain.batch_size, PretrainConfig::default().batch_size);
        c.validate().unwrap();
    }

    #[test]
    fn record_round_trips_without_output_dir() {
        let mut c = RunConfig::default();
        c.output_dir = Some("runs/x".into());
        let back: RunConfig = serde_json::from_value(c.to_record()).unwrap();
        assert_eq!(back.output_dir, None);
        assert_eq!(back.seed, c.seed);
    }

    #[test]
    fn invalid_values_fail_validation() {
        let c = RunConfig::from_json(r#"{"pretrain": {"batch_size": 1}}"#).unwrap();
        assert!(c.validate().is_err());
        let c = RunConfig::from_json(r#"{"model": {"vocab_size": 10}}"#).unwrap();
        assert!(c.validate().is_err());
    }
}
