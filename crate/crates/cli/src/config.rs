//! Run configuration file and the run-directory convention.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wastegan::evalkit::SweepConfig;
use wastegan::gan::{GanConfig, NUM_CLASSES};
use wastegan::grasp::SuctionConfig;
use wastegan::scenegen::CorpusConfig;
use wastegan::training::GanTrainConfig;
use wastegan::{Error, Result};

/// Everything a pipeline run depends on apart from paths and CLI seeds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub gan: GanConfig,
    pub train: GanTrainConfig,
    pub sweep: SweepConfig,
    pub suction: SuctionConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Missing path is a missing input; unparsable or invalid contents are a config error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.gan.validate()?;
        self.train.validate()?;
        self.sweep.validate()?;
        self.suction.validate()?;
        if self.gan.resolution != self.corpus.resolution {
            return Err(Error::config(format!(
                "gan resolution {} differs from corpus resolution {}",
                self.gan.resolution, self.corpus.resolution
            )));
        }
        if self.gan.classes != NUM_CLASSES || self.sweep.seg.classes != NUM_CLASSES {
            return Err(Error::config(format!("gan and segmenter need {NUM_CLASSES} classes")));
        }
        Ok(())
    }

    /// Canonical JSON: struct field order, so independent of key order in the file.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("run config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to toml")
    }
}

/// `<root>/<first 16 hex digits of the config hash>`.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub path: PathBuf,
    pub hash: String,
}

pub const HASH_FILE: &str = "config_hash";

impl RunDir {
    pub fn new(root: &Path, cfg: &RunConfig) -> Self {
        let hash = cfg.hash();
        Self {
            path: root.join(&hash[..16]),
            hash,
        }
    }

    /// Creates the directory and records the configuration beside the outputs.
    pub fn init(&self, cfg: &RunConfig) -> Result<()> {
        fs::create_dir_all(&self.path).map_err(|e| Error::io(&self.path, e))?;
        write(&self.path.join("config.toml"), cfg.to_toml().as_bytes())?;
        write(&self.path.join(HASH_FILE), format!("{}\n", self.hash).as_bytes())
    }

    pub fn join(&self, rel: &str) -> PathBuf {
        self.path.join(rel)
    }
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_key_order_and_rejects_unknown_keys() {
        let a = RunConfig::from_toml("[train]\nsteps = 10\nbatch_size = 4\n\n[corpus]\ncount = 12\n").unwrap();
        let b = RunConfig::from_toml("[corpus]\ncount = 12\n\n[train]\nbatch_size = 4\nsteps = 10\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), RunConfig::default().hash());
        assert!(matches!(RunConfig::from_toml("[train]\nstepz = 10\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("colour = 1\n"), Err(Error::Config(_))));
    }

    #[test]
    fn toml_round_trip_keeps_the_hash() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap().hash(), cfg.hash());
    }

    #[test]
    fn mismatched_resolution_is_rejected() {
        let r = RunConfig::from_toml("[corpus]\nresolution = 16\n");
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
