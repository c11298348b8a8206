//! Principal-component projection of token features.

use blockdance_core::{Error, Result, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    /// `[T, k]` coordinates of the centred tokens.
    pub projected: Tensor,
    /// `[k, d]` unit principal directions, one per row.
    pub components: Tensor,
    /// Variances along each component, non-increasing.
    pub eigenvalues: Vec<f64>,
    /// Sum of all covariance eigenvalues.
    pub total_variance: f64,
    pub mean: Vec<f64>,
}

impl PcaProjection {
    pub fn captured_fraction(&self) -> f64 {
        if self.total_variance == 0.0 {
            return 0.0;
        }
        self.eigenvalues.iter().sum::<f64>() / self.total_variance
    }

    /// Maps projected coordinates back to feature space.
    pub fn reconstruct(&self) -> Result<Tensor> {
        let mut out = self.projected.matmul(&self.components)?;
        let d = self.mean.len();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            *v += self.mean[k % d];
        }
        Ok(out)
    }
}

/// Relative eigenvalue floor below which a direction counts as degenerate.
const DEGENERATE_REL: f64 = 1e-12;

/// Projects the rows of `features` (`[T, d]`) onto the top-`k` eigenvectors of
/// their population covariance. Each eigenvector is signed so that its
/// largest-magnitude entry is positive. Directions with (numerically) zero
/// variance are dropped, so fewer than `k` columns may come back.
pub fn pca_project(features: &Tensor, k: usize) -> Result<PcaProjection> {
    let (t, d) = features.dims2()?;
    if k == 0 || k > t.min(d) {
        return Err(Error::Config(format!("k={k} must be in 1..={}", t.min(d))));
    }
    let x = DMatrix::from_row_slice(t, d, features.data());
    let mean: Vec<f64> = (0..d).map(|j| x.column(j).sum() / t as f64).collect();
    let mut xc = x;
    for j in 0..d {
        for i in 0..t {
            xc[(i, j)] -= mean[j];
        }
    }
    let cov = (xc.transpose() * &xc) / t as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total_variance: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let top = eig.eigenvalues[order[0]].max(0.0);
    let floor = DEGENERATE_REL * top.max(f64::MIN_POSITIVE);
    let kept: Vec<usize> = order.into_iter().take(k).filter(|&i| eig.eigenvalues[i] > floor).collect();
    if kept.len() < k {
        log::warn!("covariance has rank {} < requested k={k}; projecting onto {} components", kept.len(), kept.len());
    }
    let mut components = Vec::with_capacity(kept.len() * d);
    for &i in &kept {
        let v = eig.eigenvectors.column(i);
        let pivot = (0..d).fold(0, |best, j| if v[j].abs() > v[best].abs() { j } else { best });
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        components.extend(v.iter().map(|c| sign * c));
    }
    let components = Tensor::new(vec![kept.len(), d], components)?;
    let centred = Tensor::new(vec![t, d], (0..t * d).map(|n| xc[(n / d, n % d)]).collect())?;
    let projected = centred.matmul(&components.transpose()?)?;
    Ok(PcaProjection {
        projected,
        components,
        eigenvalues: kept.iter().map(|&i| eig.eigenvalues[i]).collect(),
        total_variance,
        mean,
    })
}
