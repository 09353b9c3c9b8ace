//! Perceptual path length without the `1/ε²` scaling.

use crate::error::{Error, Result};
use crate::eval::perceptual::PerceptualDistance;
use crate::model::Generator;
use crate::tensor::{seeded_rng, Real, Tensor};

use rand::RngExt;
use rand_distr::{Distribution, StandardNormal};

/// Anything that maps a latent batch `(n, latent_dim)` to images.
pub trait LatentGenerator<T: Real> {
    fn latent_dim(&self) -> usize;
    fn generate_images(&self, z: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Real> LatentGenerator<T> for Generator<T> {
    fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    fn generate_images(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.generate(z)
    }
}

/// Spherical interpolation between `a` and `b`; falls back to linear when they are parallel.
pub fn slerp(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cos = (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0);
    let omega = cos.acos();
    let s = omega.sin();
    if !s.is_finite() || s <= 1e-9 {
        return a
            .iter()
            .zip(b)
            .map(|(x, y)| (1.0 - t) * x + t * y)
            .collect();
    }
    let (wa, wb) = (((1.0 - t) * omega).sin() / s, (t * omega).sin() / s);
    a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect()
}

/// One latent pair and interpolation position.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSample {
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
    pub t: f64,
}

/// The pairs [`ppl`] draws for a given seed.
pub fn path_samples(latent_dim: usize, num_pairs: usize, seed: u64) -> Vec<PathSample> {
    let mut rng = seeded_rng(seed);
    (0..num_pairs)
        .map(|_| {
            let mut draw = || {
                (0..latent_dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect::<Vec<f64>>()
            };
            let z1 = draw();
            let z2 = draw();
            let t = rng.random::<f64>();
            PathSample { z1, z2, t }
        })
        .collect()
}

/// Mean of `d(G(slerp(z1, z2, t)), G(slerp(z1, z2, t + ε)))` over `num_pairs` pairs,
/// `t ~ U[0, 1)`, with no `1/ε²` factor.
pub fn ppl<T: Real>(
    g: &impl LatentGenerator<T>,
    metric: &dyn PerceptualDistance<T>,
    num_pairs: usize,
    epsilon: f64,
    seed: u64,
    batch: usize,
) -> Result<f64> {
    if num_pairs == 0 {
        return Err(Error::Validation("PPL needs at least one pair".into()));
    }
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::Validation(format!("invalid epsilon {epsilon}")));
    }
    let d = g.latent_dim();
    let samples = path_samples(d, num_pairs, seed);
    let mut total = 0.0;
    for chunk in samples.chunks(batch.max(1)) {
        let n = chunk.len();
        let mut za = Vec::with_capacity(n * d);
        let mut zb = Vec::with_capacity(n * d);
        for s in chunk {
            za.extend(slerp(&s.z1, &s.z2, s.t).into_iter().map(T::of));
            zb.extend(slerp(&s.z1, &s.z2, s.t + epsilon).into_iter().map(T::of));
        }
        let ia = g.generate_images(&Tensor::from_vec(&[n, d], za)?)?;
        let ib = g.generate_images(&Tensor::from_vec(&[n, d], zb)?)?;
        total += metric.distances(&ia, &ib)?.iter().sum::<f64>();
    }
    Ok(total / num_pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slerp_endpoints_and_norm() {
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        assert_eq!(slerp(&a, &b, 0.0), vec![1.0, 0.0]);
        let end = slerp(&a, &b, 1.0);
        assert!(end[0].abs() < 1e-12 && (end[1] - 1.0).abs() < 1e-12);
        let mid = slerp(&a, &b, 0.5);
        assert!((mid[0].hypot(mid[1]) - 1.0).abs() < 1e-12);
        assert_eq!(slerp(&a, &a, 0.3), vec![1.0, 0.0]);
    }

    #[test]
    fn samples_are_seeded() {
        assert_eq!(path_samples(4, 3, 1), path_samples(4, 3, 1));
        assert_ne!(path_samples(4, 3, 1), path_samples(4, 3, 2));
    }
}
