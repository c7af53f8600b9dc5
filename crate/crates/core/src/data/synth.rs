use super::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{RngStream, Tensor2D};

/// Isotropic unit-variance Gaussian clusters, one per class, whose closest pair
/// of centres is exactly `separation` standard deviations apart. Rows are
/// grouped by class.
pub fn synth_blobs(classes: usize, per_class: usize, dims: usize, separation: f64, stream: &mut RngStream) -> Result<Dataset> {
    if classes == 0 || per_class == 0 || dims == 0 {
        return Err(Error::Config("blob counts must be positive".into()));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::Config(format!("separation {separation} must be finite and >= 0")));
    }
    let mut centres: Vec<Vec<f64>> = (0..classes)
        .map(|_| stream.gaussian(dims, 0.0, 1.0))
        .collect::<Result<_>>()?;
    if classes > 1 {
        let mut min_dist = f64::INFINITY;
        for i in 0..classes {
            for j in i + 1..classes {
                let d: f64 = centres[i].iter().zip(&centres[j]).map(|(a, b)| (a - b).powi(2)).sum();
                min_dist = min_dist.min(d.sqrt());
            }
        }
        let factor = separation / min_dist;
        for c in &mut centres {
            for v in c.iter_mut() {
                *v *= factor;
            }
        }
    } else {
        centres[0].iter_mut().for_each(|v| *v = 0.0);
    }

    let mut features = Vec::with_capacity(classes * per_class * dims);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (label, centre) in centres.iter().enumerate() {
        for _ in 0..per_class {
            features.extend(centre.iter().map(|c| c + stream.standard_normal()));
            labels.push(label);
        }
    }
    Dataset::new(Tensor2D::new(classes * per_class, dims, features)?, labels)
}
