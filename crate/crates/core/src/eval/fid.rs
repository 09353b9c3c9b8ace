//! Fréchet distance between Gaussian fits of two feature sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

const JITTER: f64 = 1e-6;

/// Mean and unbiased covariance of the rows of `x`.
pub fn moments(x: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, d) = x.shape();
    if n < 2 || d == 0 {
        return Err(Error::Validation(format!(
            "need at least 2 samples of a non-empty feature, got {n}x{d}"
        )));
    }
    let mean = DVector::from_iterator(d, (0..d).map(|j| x.column(j).sum() / n as f64));
    let mut centered = x.clone();
    for j in 0..d {
        let m = mean[j];
        centered.column_mut(j).iter_mut().for_each(|v| *v -= m);
    }
    let cov = centered.tr_mul(&centered) / (n - 1) as f64;
    Ok((mean, cov))
}

/// Symmetric PSD square root through an eigendecomposition; negative eigenvalues clamp to 0.
pub fn sqrtm_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μa − μb‖² + tr Σa + tr Σb − 2 tr (Σa Σb)^½` from precomputed moments.
///
/// The trace term is evaluated as `tr (Σa^½ Σb Σa^½)^½`, which has the same
/// eigenvalues as `Σa Σb` but is symmetric, so a symmetric eigensolver applies.
pub fn frechet_distance(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> f64 {
    let diff = mu_a - mu_b;
    let sa = sqrtm_psd(cov_a);
    let m = &sa * cov_b * &sa;
    let m = (&m + m.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let d = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    d.max(0.0)
}

/// FID between two feature sets given as `(samples, dim)` matrices.
///
/// With no more samples than dimensions the covariances are singular; a warning is
/// logged and `1e-6·I` is added to both.
pub fn fid(features_a: &DMatrix<f64>, features_b: &DMatrix<f64>) -> Result<f64> {
    if features_a.ncols() != features_b.ncols() {
        return Err(Error::Shape(format!(
            "feature dims {} and {} differ",
            features_a.ncols(),
            features_b.ncols()
        )));
    }
    let (mu_a, mut cov_a) = moments(features_a)?;
    let (mu_b, mut cov_b) = moments(features_b)?;
    let d = features_a.ncols();
    if features_a.nrows() <= d || features_b.nrows() <= d {
        log::warn!(
            "FID with {} and {} samples in {d} dims: covariance is rank-deficient, adding jitter",
            features_a.nrows(),
            features_b.nrows()
        );
        for i in 0..d {
            cov_a[(i, i)] += JITTER;
            cov_b[(i, i)] += JITTER;
        }
    }
    let v = frechet_distance(&mu_a, &cov_a, &mu_b, &cov_b);
    if !v.is_finite() {
        return Err(Error::Numerical("FID is not finite".into()));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, shift: f64, seed: u64) -> DMatrix<f64> {
        let mut rng = seeded_rng(seed);
        DMatrix::from_fn(n, d, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v + shift
        })
    }

    #[test]
    fn identical_sets_and_symmetry() {
        let a = gaussian(500, 4, 0.0, 1);
        assert!(fid(&a, &a).unwrap() < 1e-6);
        let b = gaussian(400, 4, 0.3, 2);
        assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn sqrtm_squares_back() {
        let a = gaussian(50, 5, 0.0, 3);
        let (_, cov) = moments(&a).unwrap();
        let s = sqrtm_psd(&cov);
        assert!((&s * &s - &cov).abs().max() < 1e-10);
    }

    #[test]
    fn rank_deficient_is_not_an_error() {
        let a = gaussian(5, 8, 0.0, 4);
        let b = gaussian(5, 8, 1.0, 5);
        assert!(fid(&a, &b).unwrap().is_finite());
        assert!(fid(&gaussian(1, 8, 0.0, 6), &b).is_err());
    }
}
