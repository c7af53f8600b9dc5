use nalgebra::{DMatrix, SymmetricEigen};

use super::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Tensor2D;

/// Covariance PCA with mean centring only: projected coordinates keep their
/// variance (no whitening).
#[derive(Clone, Debug, PartialEq)]
pub struct PcaTransform {
    /// `1 x dims`.
    pub mean: Tensor2D,
    /// `dims x k`, orthonormal columns ordered by decreasing eigenvalue.
    pub components: Tensor2D,
    /// All `dims` covariance eigenvalues, non-increasing.
    pub eigenvalues: Vec<f64>,
}

impl PcaTransform {
    pub fn k(&self) -> usize {
        self.components.cols()
    }

    /// Maps projected coordinates back to the input space.
    pub fn inverse(&self, y: &Tensor2D) -> Result<Tensor2D> {
        y.matmul_t(&self.components)?.add_row(&self.mean)
    }
}

/// Fits the top-`k` principal components (sample covariance, `n - 1` denominator).
pub fn pca_fit(data: &Dataset, k: usize) -> Result<PcaTransform> {
    let (n, dims) = data.features.shape();
    if k == 0 || k > dims {
        return Err(Error::Config(format!("PCA needs 1 <= k <= {dims}, got {k}")));
    }
    if n < 2 {
        return Err(Error::Config(format!("PCA needs at least 2 samples, got {n}")));
    }
    let mean = data.features.sum_rows().scale(1.0 / n as f64)?;
    let centred = data.features.sub(&Tensor2D::vstack(&vec![&mean; n])?)?;
    let cov = centred.t_matmul(&centred)?.scale(1.0 / (n - 1) as f64)?;

    let eig = SymmetricEigen::new(DMatrix::from_row_slice(dims, dims, cov.data()));
    let mut order: Vec<usize> = (0..dims).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut components = vec![0.0; dims * k];
    for (j, &src) in order.iter().take(k).enumerate() {
        let v = eig.eigenvectors.column(src);
        // Sign convention: the largest-magnitude entry is positive.
        let pivot = (0..dims).fold(0, |best, i| if v[i].abs() > v[best].abs() { i } else { best });
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..dims {
            components[i * k + j] = sign * v[i];
        }
    }
    Ok(PcaTransform {
        mean,
        components: Tensor2D::new(dims, k, components)?,
        eigenvalues: order.iter().map(|&i| eig.eigenvalues[i]).collect(),
    })
}

/// `(x − mean) · components`.
pub fn pca_transform(t: &PcaTransform, x: &Tensor2D) -> Result<Tensor2D> {
    if x.cols() != t.mean.cols() {
        return Err(Error::Shape(format!(
            "input has {} columns, PCA was fitted on {}",
            x.cols(),
            t.mean.cols()
        )));
    }
    let neg_mean = t.mean.scale(-1.0)?;
    x.add_row(&neg_mean)?.matmul(&t.components)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::RngStream;

    fn random_data(n: usize, d: usize, seed: u64) -> Dataset {
        let mut s = RngStream::new(seed, 0);
        // Anisotropic so eigenvalues are well separated.
        let mut v = s.gaussian(n * d, 0.0, 1.0).unwrap();
        for (i, x) in v.iter_mut().enumerate() {
            *x *= 1.0 + (i % d) as f64;
        }
        Dataset::new(Tensor2D::new(n, d, v).unwrap(), vec![0; n]).unwrap()
    }

    #[test]
    fn points_on_a_line() {
        let rows: Vec<[f64; 2]> = (0..10).map(|t| [t as f64, 2.0 * t as f64]).collect();
        let data = Dataset::new(Tensor2D::from_rows(&rows).unwrap(), vec![0; 10]).unwrap();
        let p = pca_fit(&data, 2).unwrap();
        let c = [p.components.get(0, 0), p.components.get(1, 0)];
        let s5 = 5f64.sqrt();
        assert!((c[0] - 1.0 / s5).abs() < 1e-10 && (c[1] - 2.0 / s5).abs() < 1e-10, "{c:?}");
        assert!(p.eigenvalues[1].abs() < 1e-10);
    }

    #[test]
    fn full_rank_reconstruction() {
        let data = random_data(40, 6, 1);
        let p = pca_fit(&data, 6).unwrap();
        let back = p.inverse(&pca_transform(&p, &data.features).unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(data.features.data()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn orthonormal_components_and_no_whitening() {
        let data = random_data(200, 5, 2);
        let p = pca_fit(&data, 3).unwrap();
        let gram = p.components.t_matmul(&p.components).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((gram.get(i, j) - e).abs() < 1e-8);
            }
        }
        assert!(p.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        let y = pca_transform(&p, &data.features).unwrap();
        for j in 0..3 {
            let col: Vec<f64> = (0..y.rows()).map(|r| y.get(r, j)).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
            assert!((var - p.eigenvalues[j]).abs() < 1e-8 * p.eigenvalues[j].max(1.0));
        }
    }

    #[test]
    fn mean_maps_to_origin_and_components_to_axes() {
        let data = random_data(50, 4, 3);
        let p = pca_fit(&data, 4).unwrap();
        let y = pca_transform(&p, &p.mean).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));
        // A component shifted by the mean projects onto a unit axis.
        let comp_rows = p.components.transpose().add_row(&p.mean).unwrap();
        let proj = pca_transform(&p, &comp_rows).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((proj.get(i, j) - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn reconstruction_error_shrinks_with_k() {
        let data = random_data(60, 5, 4);
        let errs: Vec<f64> = (1..=5)
            .map(|k| {
                let p = pca_fit(&data, k).unwrap();
                let back = p.inverse(&pca_transform(&p, &data.features).unwrap()).unwrap();
                back.sub(&data.features).unwrap().sq_norm().unwrap()
            })
            .collect();
        assert!(errs.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{errs:?}");
    }

    #[test]
    fn k_larger_than_dims_is_rejected() {
        assert!(matches!(pca_fit(&random_data(10, 3, 5), 4), Err(Error::Config(_))));
    }
}
