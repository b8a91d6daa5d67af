use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{load_modelnet40, synth_shapes, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::models::{ModelConfig, Variant};
use crate::optim::OptimConfig;
use crate::tensor::Rng;

use super::train::DensitySampling;

pub const CONFIG_FILE: &str = "config.toml";
pub const SYNTHETIC_EPOCHS: usize = 60;
pub const MODELNET_EPOCHS: usize = 200;

/// Where training data comes from: `synthetic` or `modelnet40:<dir>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DataSource {
    Synthetic,
    ModelNet40(PathBuf),
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "synthetic" {
            return Ok(DataSource::Synthetic);
        }
        match s.strip_prefix("modelnet40:") {
            Some(dir) if !dir.is_empty() => Ok(DataSource::ModelNet40(PathBuf::from(dir))),
            _ => Err(Error::Config(format!(
                "unknown data source `{s}` (expected `synthetic` or `modelnet40:<dir>`)"
            ))),
        }
    }
}

impl TryFrom<String> for DataSource {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DataSource> for String {
    fn from(d: DataSource) -> String {
        d.to_string()
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Synthetic => f.write_str("synthetic"),
            DataSource::ModelNet40(dir) => write!(f, "modelnet40:{}", dir.display()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub per_class: usize,
    pub points: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            per_class: 160,
            points: 256,
        }
    }
}

/// Everything needed to reproduce a run. Written to `config.toml` in the run
/// directory before training starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub variant: Variant,
    pub data: DataSource,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub out: PathBuf,
    /// Draw lower evaluation densities as prefixes of one permutation, so each
    /// sparser cloud is a subset of the denser ones. Off: independent draws.
    #[serde(default)]
    pub nested_density: bool,
    #[serde(default)]
    pub modelnet_points: usize,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub optim: OptimConfig,
}

impl RunConfig {
    /// Defaults for `variant` on `data`: desk-scale widths for synthetic data,
    /// full widths for ModelNet40.
    pub fn new(variant: Variant, data: DataSource, seed: u64, out: impl Into<PathBuf>) -> Self {
        let synthetic = SyntheticConfig::default();
        let modelnet_points = 1024;
        let (epochs, model) = match data {
            DataSource::Synthetic => (
                SYNTHETIC_EPOCHS,
                ModelConfig::desk(variant, crate::data::SYNTH_CLASSES.len(), synthetic.points),
            ),
            DataSource::ModelNet40(_) => (
                MODELNET_EPOCHS,
                ModelConfig {
                    variant,
                    num_classes: 40,
                    points_in: modelnet_points,
                    ..ModelConfig::default()
                },
            ),
        };
        RunConfig {
            variant,
            data,
            epochs,
            batch_size: 32,
            seed,
            out: out.into(),
            nested_density: false,
            modelnet_points,
            synthetic,
            augment: AugmentConfig::default(),
            model: ModelConfig { seed, ..model },
            optim: OptimConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for batch norm".into()));
        }
        if self.model.variant != self.variant {
            return Err(Error::Config(format!(
                "model.variant `{}` disagrees with variant `{}`",
                self.model.variant, self.variant
            )));
        }
        self.model.validate()
    }

    /// Points per cloud for the configured data source.
    pub fn points_per_cloud(&self) -> usize {
        match self.data {
            DataSource::Synthetic => self.synthetic.points,
            DataSource::ModelNet40(_) => self.modelnet_points,
        }
    }

    /// Trains at `points` per cloud instead of the source default.
    pub fn set_points(&mut self, points: usize) {
        match self.data {
            DataSource::Synthetic => self.synthetic.points = points,
            DataSource::ModelNet40(_) => self.modelnet_points = points,
        }
        self.model.points_in = points;
    }

    pub fn density_sampling(&self) -> DensitySampling {
        DensitySampling {
            seed: self.seed,
            nested: self.nested_density,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.data {
            DataSource::Synthetic => synth_shapes(
                self.synthetic.per_class,
                self.synthetic.points,
                &mut Rng::new(self.seed),
            ),
            DataSource::ModelNet40(dir) => {
                if !dir.is_dir() {
                    return Err(Error::Config(format!("dataset directory {} not found", dir.display())));
                }
                load_modelnet40(dir, self.modelnet_points, self.seed)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_source_parsing() {
        assert_eq!("synthetic".parse::<DataSource>().unwrap(), DataSource::Synthetic);
        assert_eq!(
            "modelnet40:/data/mn40".parse::<DataSource>().unwrap(),
            DataSource::ModelNet40("/data/mn40".into())
        );
        assert!("modelnet40:".parse::<DataSource>().is_err());
        assert!("imagenet".parse::<DataSource>().is_err());
    }

    #[test]
    fn toml_roundtrip() {
        for data in [DataSource::Synthetic, DataSource::ModelNet40("/tmp/mn".into())] {
            let cfg = RunConfig::new(Variant::Sa, data, 7, "runs/x");
            cfg.validate().unwrap();
            let text = cfg.to_toml().unwrap();
            assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn defaults() {
        let cfg = RunConfig::new(Variant::Mul, DataSource::Synthetic, 7, "o");
        assert_eq!((cfg.epochs, cfg.batch_size, cfg.points_per_cloud()), (60, 32, 256));
        let mn = RunConfig::new(Variant::Mul, DataSource::ModelNet40("d".into()), 7, "o");
        assert_eq!(
            (mn.epochs, mn.model.num_classes, mn.points_per_cloud()),
            (200, 40, 1024)
        );
        let mut low = mn.clone();
        low.set_points(128);
        assert_eq!((low.points_per_cloud(), low.model.points_in), (128, 128));
    }
}
