//! Datasets, loaders, splits and preprocessing.

mod idx;
mod pca;
mod synth;
mod tabular;

pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx, write_idx_images, write_idx_labels, IdxImages};
pub use pca::{pca_fit, pca_transform, PcaTransform};
pub use synth::synth_blobs;
pub use tabular::{load_csv_features, write_csv_features};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{RngStream, Tensor2D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor2D,
    pub labels: Vec<usize>,
    /// `(height, width)` when rows are images.
    pub image_shape: Option<(usize, usize)>,
    pub split_tag: Option<SplitTag>,
}

impl Dataset {
    pub fn new(features: Tensor2D, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.rows()
            )));
        }
        Ok(Self {
            features,
            labels,
            image_shape: None,
            split_tag: None,
        })
    }

    pub fn with_image_shape(mut self, shape: Option<(usize, usize)>) -> Self {
        self.image_shape = shape;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.cols()
    }

    /// `max label + 1`.
    pub fn classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            features: self.features.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            image_shape: self.image_shape,
            split_tag: self.split_tag,
        })
    }

    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        Ok(Dataset {
            features: Tensor2D::vstack(&[&self.features, &other.features])?,
            labels: self.labels.iter().chain(&other.labels).copied().collect(),
            image_shape: self.image_shape,
            split_tag: None,
        })
    }
}

/// Train / validation / test partitions.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

fn part_size(fraction: f64, n: usize) -> usize {
    // Tolerates representation error such as 0.29 * 100 = 28.999999999999996.
    (fraction * n as f64 + 1e-9).floor() as usize
}

/// Deterministic shuffled partition by `(train, valid, test)` fractions.
///
/// Partitions are consecutive slices of one seeded permutation, so their union
/// is a prefix of it and rows keep permutation order.
pub fn split(data: &Dataset, fractions: (f64, f64, f64), stream: &mut RngStream) -> Result<Splits> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(0.0..=1.0).contains(f)) || ft + fv + fs > 1.0 + 1e-12 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be in [0, 1] and sum to at most 1"
        )));
    }
    let n = data.len();
    let sizes = [part_size(ft, n), part_size(fv, n), part_size(fs, n)];
    for (name, (&f, &size)) in ["train", "valid", "test"].iter().zip([ft, fv, fs].iter().zip(&sizes)) {
        if f > 0.0 && size == 0 {
            return Err(Error::Config(format!(
                "{name} partition is empty ({f} of {n} samples)"
            )));
        }
    }
    let perm = stream.permutation(n);
    let mut start = 0;
    let mut parts = Vec::with_capacity(3);
    for (tag, size) in [SplitTag::Train, SplitTag::Valid, SplitTag::Test].into_iter().zip(sizes) {
        let mut d = data.subset(&perm[start..start + size])?;
        d.split_tag = Some(tag);
        parts.push(d);
        start += size;
    }
    let test = parts.pop().expect("three parts");
    let valid = parts.pop().expect("three parts");
    let train = parts.pop().expect("three parts");
    Ok(Splits { train, valid, test })
}
