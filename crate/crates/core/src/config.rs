//! Pipeline configuration file: dataset sources and preparation options,
//! model, training and tiling sections, output directory and seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::TilingConfig;
use crate::model::ModelConfig;
use crate::training::{DataSource, PrepareOptions, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub sources: Vec<DataSource>,
    /// Prepared patch directory; defaults to `<out>/prepared`.
    pub prepared: Option<PathBuf>,
    pub options: PrepareOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub out: PathBuf,
    /// When set, overrides the model and training seeds.
    pub seed: Option<u64>,
    pub dataset: DatasetSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tiling: TilingConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            out: PathBuf::from("rockseg_out"),
            seed: None,
            dataset: DatasetSection::default(),
            model: ModelConfig::toy(),
            train: TrainConfig::default(),
            tiling: TilingConfig::default(),
        }
    }
}

pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.toml";

impl PipelineConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    /// Reads `path` when given, otherwise starts from defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Propagates the top-level seed and checks section invariants.
    pub fn finalize(mut self) -> Result<Self> {
        if let Some(seed) = self.seed {
            self.model.seed = seed;
            self.train.seed = seed;
        }
        if self.dataset.options.patch_size != self.model.patch_input_size {
            return Err(Error::Config(format!(
                "dataset patch_size {} differs from model patch_input_size {}",
                self.dataset.options.patch_size, self.model.patch_input_size
            )));
        }
        self.train.validate()?;
        self.tiling.validate()?;
        Ok(self)
    }

    pub fn prepared_dir(&self) -> PathBuf {
        self.dataset
            .prepared
            .clone()
            .unwrap_or_else(|| self.out.join("prepared"))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out.join(crate::training::BEST_CHECKPOINT_DIR)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    /// Writes the effective config into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(EFFECTIVE_CONFIG_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::BlendWindow;
    use crate::model::Backbone;
    use crate::training::SourceTag;

    #[test]
    fn parses_sections_and_propagates_seed() {
        let text = r#"
out = "run"
seed = 11

[[dataset.sources]]
images = "ct/images"
masks = "ct/masks"
tag = "CT"

[[dataset.sources]]
images = "sem/images"
tag = "SEM"

[dataset.options]
isodata = true

[model]
backbone = "toy"

[train]
learning_rate = 0.001
max_epochs = 3

[tiling]
stride = 256
window = "unit"
"#;
        let c = PipelineConfig::from_toml(text, Path::new("x.toml"))
            .unwrap()
            .finalize()
            .unwrap();
        assert_eq!(c.dataset.sources.len(), 2);
        assert_eq!(c.dataset.sources[1].tag, SourceTag::Sem);
        assert!(c.dataset.sources[1].masks.is_none());
        assert!(c.dataset.options.isodata);
        assert_eq!(c.model.backbone, Backbone::Toy);
        assert_eq!((c.model.seed, c.train.seed), (11, 11));
        assert_eq!(c.train.max_epochs, 3);
        assert_eq!(c.tiling.window, BlendWindow::Unit);
        assert_eq!(c.prepared_dir(), PathBuf::from("run/prepared"));
    }

    #[test]
    fn shipped_toy_config_parses() {
        let text = include_str!("../../../configs/toy.toml");
        let c = PipelineConfig::from_toml(text, Path::new("toy.toml")).unwrap().finalize().unwrap();
        assert_eq!(c.train.learning_rate, 1e-3);
        assert_eq!(c.dataset.sources.len(), 2);
    }

    #[test]
    fn echo_round_trips() {
        let c = PipelineConfig::default().finalize().unwrap();
        let back = PipelineConfig::from_toml(&c.to_toml(), Path::new("echo")).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(
            PipelineConfig::from_toml("[train]\nlr = 1.0\n", Path::new("c")),
            Err(Error::Config(_))
        ));
        let bad = PipelineConfig::from_toml("[tiling]\nthreshold = 1.5\n", Path::new("c")).unwrap();
        assert!(bad.finalize().is_err());
    }
}
