//! Run configuration: one TOML document covering every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierConfig, ClassifierTrainConfig};
use crate::data::SynthParams;
use crate::error::{Error, Result};
use crate::extractor::{ExtractorTrainConfig, UnetConfig};
use crate::seed::{derive_seed, stage};

pub const SNAPSHOT_NAME: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset root holding `train/` (and optionally `test/`).
    pub root: PathBuf,
    /// Side length images are resized to on load.
    pub image_size: usize,
    /// Used when `root/test` is absent, and by `synth`.
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            image_size: 256,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n: usize,
    pub size: usize,
    pub params: SynthParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 200,
            size: 128,
            params: SynthParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CamConfig {
    pub threshold: f64,
    /// Also write per-layer and merged heatmaps under `plots/cam/`.
    pub heatmaps: bool,
}

impl Default for CamConfig {
    fn default() -> Self {
        Self {
            threshold: crate::cam::DEFAULT_THRESHOLD,
            heatmaps: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    /// Root seed; every stage seed is derived from it.
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub classifier: ClassifierConfig,
    pub classifier_train: ClassifierTrainConfig,
    pub cam: CamConfig,
    pub extractor: UnetConfig,
    pub extractor_train: ExtractorTrainConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Fans the root seed out to every stage and aligns model input sizes with
    /// the data size.
    pub fn resolve(mut self) -> Result<Self> {
        let s = self.seed;
        self.classifier.seed = derive_seed(s, stage::CLASSIFIER);
        self.classifier_train.seed = derive_seed(s, stage::CLASSIFIER + 100);
        self.extractor.seed = derive_seed(s, stage::EXTRACTOR);
        self.extractor_train.seed = derive_seed(s, stage::CONTRASTIVE);
        self.classifier.input_size = self.data.image_size;
        self.extractor.input_size = self.data.image_size;
        self.classifier.validate()?;
        self.extractor.validate()?;
        if !(0.0..=1.0).contains(&self.data.train_fraction) {
            return Err(Error::Config("train_fraction must lie in [0, 1]".into()));
        }
        Ok(self)
    }

    /// Writes the resolved configuration into the output directory.
    pub fn write_snapshot(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let path = self.out.join(SNAPSHOT_NAME);
        std::fs::write(&path, self.to_toml_string()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, stage::SPLIT)
    }
}
