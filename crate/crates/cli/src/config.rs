//! The JSON experiment document.

use std::path::{Path, PathBuf};

use dropaug::backprojection::BackProjectionConfig;
use dropaug::data::{load_csv_features, load_idx, pca_fit, pca_transform, split, synth_blobs, Dataset, Splits};
use dropaug::noise::NoiseScheme;
use dropaug::training::{ExperimentConfig, Protocol};
use dropaug::{Error, Result, RngStream};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

// Stream ids for the data pipeline; training keys its own streams from the seed.
const STREAM_DATA: u64 = 0xDA7A;
const STREAM_SPLIT: u64 = 0x5917;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Blobs {
        classes: usize,
        per_class: usize,
        dims: usize,
        separation: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// Keep only the first `limit` records.
        #[serde(default)]
        limit: Option<usize>,
    },
    Csv {
        path: PathBuf,
        #[serde(default = "default_label_column")]
        label_column: String,
    },
}

fn default_label_column() -> String {
    "label".into()
}

fn default_split() -> (f64, f64, f64) {
    (0.6, 0.2, 0.2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    #[serde(default = "yes")]
    pub hidden_bias: bool,
    /// Output width; defaults to the number of classes in the data.
    #[serde(default)]
    pub classes: Option<usize>,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub protocol: Protocol,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub refit_epochs: usize,
    #[serde(default = "default_one")]
    pub eval_every: usize,
    #[serde(default = "default_chunk")]
    pub bp_chunk: usize,
}

fn default_epochs() -> usize {
    50
}
fn default_batch() -> usize {
    100
}
fn default_lr() -> f64 {
    0.1
}
fn default_one() -> usize {
    1
}
fn default_chunk() -> usize {
    100
}
fn default_samples() -> usize {
    16
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackprojectSection {
    pub checkpoint: PathBuf,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_partition")]
    pub partition: Partition,
}

fn default_partition() -> Partition {
    Partition::Test
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub seed: u64,
    pub data: DataSource,
    #[serde(default = "default_split")]
    pub split: (f64, f64, f64),
    #[serde(default)]
    pub pca_k: Option<usize>,
    pub model: ModelSection,
    #[serde(default = "NoiseScheme::none")]
    pub scheme: NoiseScheme,
    #[serde(default)]
    pub backprojection: Option<BackProjectionConfig>,
    pub training: TrainingSection,
    #[serde(default)]
    pub backproject: Option<BackprojectSection>,
}

impl CliConfig {
    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: CliConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data {
            DataSource::Idx { images, labels, .. } => {
                fix(images);
                fix(labels);
            }
            DataSource::Csv { path, .. } => fix(path),
            DataSource::Blobs { .. } => {}
        }
        if let Some(bp) = &mut self.backproject {
            fix(&mut bp.checkpoint);
        }
    }

    /// SHA-256 of the canonical JSON form (after overrides).
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.data {
            DataSource::Blobs {
                classes,
                per_class,
                dims,
                separation,
            } => synth_blobs(*classes, *per_class, *dims, *separation, &mut RngStream::new(self.seed, STREAM_DATA)),
            DataSource::Idx { images, labels, limit } => {
                let d = load_idx(images, labels)?;
                match limit {
                    Some(n) if *n < d.len() => d.subset(&(0..*n).collect::<Vec<_>>()),
                    _ => Ok(d),
                }
            }
            DataSource::Csv { path, label_column } => load_csv_features(path, label_column),
        }
    }

    /// Loads, splits and (optionally) projects the data; PCA is fitted on the training part only.
    pub fn load_splits(&self) -> Result<Splits> {
        let data = self.load_dataset()?;
        let mut splits = split(&data, self.split, &mut RngStream::new(self.seed, STREAM_SPLIT))?;
        if let Some(k) = self.pca_k {
            let t = pca_fit(&splits.train, k)?;
            for part in [&mut splits.train, &mut splits.valid, &mut splits.test] {
                if !part.is_empty() {
                    part.features = pca_transform(&t, &part.features)?;
                }
                part.image_shape = None;
            }
        }
        Ok(splits)
    }

    pub fn layer_dims(&self, splits: &Splits) -> Vec<usize> {
        let classes = self.model.classes.unwrap_or_else(|| {
            [&splits.train, &splits.valid, &splits.test]
                .iter()
                .map(|d| d.classes())
                .max()
                .unwrap_or(0)
        });
        let input = match self.pca_k {
            Some(k) => k,
            None => splits.train.dims(),
        };
        let mut dims = vec![input];
        dims.extend(&self.model.hidden);
        dims.push(classes);
        dims
    }

    pub fn experiment(&self, splits: &Splits) -> ExperimentConfig {
        let t = &self.training;
        ExperimentConfig {
            layer_dims: self.layer_dims(splits),
            hidden_bias: self.model.hidden_bias,
            protocol: t.protocol,
            scheme: self.scheme.clone(),
            bp_config: self.backprojection.clone(),
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            seed: self.seed,
            refit_epochs: t.refit_epochs,
            eval_every: t.eval_every,
            bp_chunk: t.bp_chunk,
        }
    }
}
