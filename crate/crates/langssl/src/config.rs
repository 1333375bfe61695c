//! TOML run configuration covering every stage of the pipeline.

use std::fs;
use std::path::Path;

use langssl_core::data::SyntheticCorpusSpec;
use langssl_core::eval::ProbeConfig;
use langssl_core::trainer::TrainConfig;
use langssl_core::{ModelConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// File name of the resolved configuration inside a run directory.
pub const RESOLVED_FILE: &str = "config.resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus_seed: u64,
    pub corpus: SyntheticCorpusSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let corpus = SyntheticCorpusSpec::default();
        Self {
            corpus_seed: 7,
            model: ModelConfig::desk(Variant::Xlsr, corpus.languages.len()),
            corpus,
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path`, or the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(Error::io(p))?;
                Self::parse(&text).map_err(|e| match e {
                    Error::Config(msg) => Error::Config(format!("{}: {msg}", p.display())),
                    other => other,
                })
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.probe.validate()?;
        if self.model.num_languages != self.corpus.languages.len() {
            return Err(Error::Config(format!(
                "model.num_languages = {} but the corpus lists {} languages",
                self.model.num_languages,
                self.corpus.languages.len()
            )));
        }
        if self.model.encoder.input_feature_dim != self.corpus.feature_dim {
            return Err(Error::Config(format!(
                "encoder input_feature_dim {} != corpus feature_dim {}",
                self.model.encoder.input_feature_dim, self.corpus.feature_dim
            )));
        }
        self.probe.resolve_tap(&self.model)?;
        Ok(())
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RESOLVED_FILE);
        fs::write(&path, self.to_toml()).map_err(Error::io(&path))
    }
}
