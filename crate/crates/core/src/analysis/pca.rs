use nalgebra::DMatrix;

use super::AnalysisError;
use crate::diffcore::Array;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentProjection {
    /// `2×h`, orthonormal rows.
    pub components: Array,
    /// Column means removed before projecting.
    pub mean: Vec<f64>,
    /// `N×2`
    pub projected: Array,
    /// Sample variance along each component, nonincreasing.
    pub explained_variance: [f64; 2],
}

impl LatentProjection {
    /// Projects new points with the fitted mean and components.
    pub fn project(&self, x: &Array) -> Result<Array, AnalysisError> {
        let h = self.mean.len();
        if x.cols() != h {
            return Err(AnalysisError::Misaligned(format!("expected {h} latent columns, got {}", x.cols())));
        }
        let mut out = Vec::with_capacity(x.rows() * 2);
        for r in 0..x.rows() {
            let row = x.row(r);
            for k in 0..2 {
                let c = self.components.row(k);
                out.push(row.iter().zip(&self.mean).zip(c).map(|((v, m), c)| (v - m) * c).sum());
            }
        }
        Ok(Array::matrix(x.rows(), 2, out)?)
    }
}

/// Top-2 principal directions of `latents` (`N×h`) from the SVD of the
/// centered matrix. Each component is signed so its largest-magnitude
/// coordinate is positive. A rank-1 input gets a second component with zero
/// variance.
pub fn pca_project(latents: &Array) -> Result<LatentProjection, AnalysisError> {
    let (n, h) = (latents.rows(), latents.cols());
    if n <= 2 {
        return Err(AnalysisError::TooShort { needed: 3, got: n });
    }
    if h < 2 {
        return Err(AnalysisError::Misaligned(format!("PCA to 2 components needs h >= 2, got {h}")));
    }
    if !latents.all_finite() {
        return Err(AnalysisError::NonFinite("latent states".into()));
    }
    let mut mean = vec![0.0; h];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(latents.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, h, |r, c| latents.get2(r, c) - mean[c]);

    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("v_t was requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let mut comps = Vec::with_capacity(2 * h);
    let mut var = [0.0; 2];
    for (k, &i) in order.iter().take(2).enumerate() {
        let mut row: Vec<f64> = v_t.row(i).iter().copied().collect();
        let lead = row.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if lead < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
        comps.extend(row);
        let s = svd.singular_values[i];
        var[k] = s * s / (n - 1) as f64;
    }
    // round-off can leave the null direction a hair above zero
    if var[1] <= 1e-24 * var[0].max(f64::MIN_POSITIVE) {
        var[1] = 0.0;
    }
    let components = Array::matrix(2, h, comps)?;
    let mut proj = LatentProjection {
        components,
        mean,
        projected: Array::zeros(&[n, 2]),
        explained_variance: var,
    };
    proj.projected = proj.project(latents)?;
    Ok(proj)
}
