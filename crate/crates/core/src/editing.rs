//! Latent editing: style mixing, morphing and PCA direction traversal.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::fid::moments;
use crate::model::Generator;
use crate::tensor::Tensor;

/// One latent vector per generator layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayeredCode {
    pub per_layer: Vec<Vec<f64>>,
}

impl LayeredCode {
    pub fn new(per_layer: Vec<Vec<f64>>) -> Result<Self> {
        let d = per_layer
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::Validation("layered code has no layers".into()))?;
        if per_layer.iter().any(|v| v.len() != d) {
            return Err(Error::Shape("layer codes differ in length".into()));
        }
        Ok(Self { per_layer })
    }

    /// The same `z` at every one of `layers` layers.
    pub fn broadcast(z: &[f64], layers: usize) -> Self {
        Self {
            per_layer: vec![z.to_vec(); layers],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.per_layer.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.per_layer[0].len()
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.num_layers() != other.num_layers() || self.latent_dim() != other.latent_dim() {
            return Err(Error::Shape(format!(
                "codes of {}x{} and {}x{}",
                self.num_layers(),
                self.latent_dim(),
                other.num_layers(),
                other.latent_dim()
            )));
        }
        Ok(())
    }
}

/// Layers `1..l-1` (1-based) from `a` and `l..=L` from `b`; `l` ranges over `1..=L+1`.
pub fn style_mix(a: &LayeredCode, b: &LayeredCode, l: usize) -> Result<LayeredCode> {
    a.check_compatible(b)?;
    let layers = a.num_layers();
    if !(1..=layers + 1).contains(&l) {
        return Err(Error::Validation(format!(
            "crossover layer {l} outside 1..={}",
            layers + 1
        )));
    }
    let per_layer = (0..layers)
        .map(|i| {
            if i + 1 < l {
                a.per_layer[i].clone()
            } else {
                b.per_layer[i].clone()
            }
        })
        .collect();
    Ok(LayeredCode { per_layer })
}

/// Per-layer `(1 − β)·a + β·b`.
pub fn morph(a: &LayeredCode, b: &LayeredCode, beta: f64) -> Result<LayeredCode> {
    a.check_compatible(b)?;
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Validation(format!(
            "morph parameter {beta} outside [0, 1]"
        )));
    }
    let per_layer = a
        .per_layer
        .iter()
        .zip(&b.per_layer)
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(p, q)| (1.0 - beta) * p + beta * q)
                .collect()
        })
        .collect();
    Ok(LayeredCode { per_layer })
}

/// Orthonormal principal directions, most variance first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionBasis {
    pub mean: Vec<f64>,
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
}

/// Top-`k` principal components of the rows of `samples`. Each component is signed
/// so that its largest-magnitude entry is positive.
pub fn pca_directions(samples: &DMatrix<f64>, k: usize) -> Result<DirectionBasis> {
    let (n, d) = samples.shape();
    if k == 0 || k > d || n <= k {
        return Err(Error::Validation(format!(
            "cannot take {k} components from {n} samples of dimension {d}"
        )));
    }
    let (mean, cov) = moments(samples)?;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut components = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    for &j in &order[..k] {
        let mut u: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
        let big = u
            .iter()
            .copied()
            .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if big < 0.0 {
            u.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(u);
        explained_variance.push(eig.eigenvalues[j].max(0.0));
    }
    Ok(DirectionBasis {
        mean: mean.iter().copied().collect(),
        components,
        explained_variance,
    })
}

/// `code + σ·u` at every layer, one code per σ.
pub fn traverse(code: &LayeredCode, direction: &[f64], sigmas: &[f64]) -> Result<Vec<LayeredCode>> {
    if direction.len() != code.latent_dim() {
        return Err(Error::Shape(format!(
            "direction of {} for latent size {}",
            direction.len(),
            code.latent_dim()
        )));
    }
    Ok(sigmas
        .iter()
        .map(|&s| LayeredCode {
            per_layer: code
                .per_layer
                .iter()
                .map(|v| v.iter().zip(direction).map(|(x, u)| x + s * u).collect())
                .collect(),
        })
        .collect())
}

/// Renders a batch of layered codes through `g`.
pub fn render_codes(g: &Generator<f32>, codes: &[LayeredCode]) -> Result<Tensor<f32>> {
    let layers = g.spec.num_layers();
    let d = g.latent_dim();
    if codes.is_empty() {
        return Err(Error::Validation("no codes to render".into()));
    }
    let mut per_layer = Vec::with_capacity(layers);
    for t in 0..layers {
        let mut data = Vec::with_capacity(codes.len() * d);
        for c in codes {
            if c.num_layers() != layers || c.latent_dim() != d {
                return Err(Error::Shape(format!(
                    "code of {}x{} for a {layers}x{d} generator",
                    c.num_layers(),
                    c.latent_dim()
                )));
            }
            data.extend(c.per_layer[t].iter().map(|&v| v as f32));
        }
        per_layer.push(Tensor::from_vec(&[codes.len(), d], data)?);
    }
    Ok(g.forward_codes(per_layer, None)?.images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;
    use rand_distr::{Distribution, StandardNormal};

    fn code(seed: u64, layers: usize, d: usize) -> LayeredCode {
        let mut rng = seeded_rng(seed);
        LayeredCode::new(
            (0..layers)
                .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn style_mix_boundaries_and_partition() {
        let (a, b) = (code(1, 4, 3), code(2, 4, 3));
        assert_eq!(style_mix(&a, &b, 1).unwrap(), b);
        assert_eq!(style_mix(&a, &b, 5).unwrap(), a);
        assert_eq!(style_mix(&a, &a, 3).unwrap(), a);
        for l in 1..=5 {
            let ab = style_mix(&a, &b, l).unwrap();
            let ba = style_mix(&b, &a, l).unwrap();
            for i in 0..4 {
                let from_a = ab.per_layer[i] == a.per_layer[i];
                let other_from_a = ba.per_layer[i] == a.per_layer[i];
                assert!(from_a ^ other_from_a);
            }
        }
        assert!(style_mix(&a, &b, 0).is_err());
        assert!(style_mix(&a, &b, 6).is_err());
    }

    #[test]
    fn morph_properties() {
        let (a, b) = (code(3, 3, 4), code(4, 3, 4));
        assert_eq!(morph(&a, &b, 0.0).unwrap(), a);
        assert_eq!(morph(&a, &b, 1.0).unwrap(), b);
        let neg = LayeredCode {
            per_layer: a
                .per_layer
                .iter()
                .map(|v| v.iter().map(|x| -x).collect())
                .collect(),
        };
        assert!(morph(&a, &neg, 0.5)
            .unwrap()
            .per_layer
            .iter()
            .flatten()
            .all(|v| v.abs() < 1e-15));
        let (b1, b2) = (0.3, 0.6);
        let twice = morph(&morph(&a, &b, b1).unwrap(), &b, b2).unwrap();
        let once = morph(&a, &b, b1 + b2 - b1 * b2).unwrap();
        for (x, y) in twice
            .per_layer
            .iter()
            .flatten()
            .zip(once.per_layer.iter().flatten())
        {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn pca_recovers_a_line() {
        let v = [3.0, -4.0, 0.0, 12.0];
        let norm = 13.0;
        let mut rng = seeded_rng(5);
        let coeffs: Vec<f64> = (0..200).map(|_| StandardNormal.sample(&mut rng)).collect();
        let samples = DMatrix::from_fn(200, 4, |i, j| coeffs[i] * v[j]);
        let basis = pca_directions(&samples, 1).unwrap();
        for (u, w) in basis.components[0].iter().zip(v) {
            assert!((u - w / norm).abs() < 1e-4);
        }
    }

    #[test]
    fn pca_isotropic_orthonormal_and_reconstruction() {
        let mut rng = seeded_rng(6);
        let d = 5;
        let samples = DMatrix::from_fn(10_000, d, |_, _| StandardNormal.sample(&mut rng));
        let basis = pca_directions(&samples, d).unwrap();
        let (lo, hi) = basis
            .explained_variance
            .iter()
            .fold((f64::MAX, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
        assert!(hi / lo < 1.2);
        assert!(basis.explained_variance.windows(2).all(|w| w[0] >= w[1]));
        for i in 0..d {
            for j in 0..d {
                let dot: f64 = basis.components[i]
                    .iter()
                    .zip(&basis.components[j])
                    .map(|(a, b)| a * b)
                    .sum();
                assert!((dot - (i == j) as u8 as f64).abs() < 1e-6);
            }
        }
        for r in 0..20 {
            let x: Vec<f64> = (0..d).map(|j| samples[(r, j)] - basis.mean[j]).collect();
            let mut back = vec![0.0; d];
            for u in &basis.components {
                let c: f64 = x.iter().zip(u).map(|(a, b)| a * b).sum();
                back.iter_mut().zip(u).for_each(|(bv, uv)| *bv += c * uv);
            }
            assert!(x.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-6));
        }
        assert!(pca_directions(&samples.rows(0, 3).into_owned(), 3).is_err());
    }

    #[test]
    fn traversal_offsets() {
        let c = code(7, 3, 4);
        let u = vec![0.5, 0.5, 0.5, 0.5];
        let out = traverse(&c, &u, &[-2.0, 0.0, 2.0]).unwrap();
        assert_eq!(out[1], c);
        for l in 0..3 {
            for j in 0..4 {
                let mid = c.per_layer[l][j];
                assert!(
                    ((out[0].per_layer[l][j] + out[2].per_layer[l][j]) / 2.0 - mid).abs() < 1e-12
                );
            }
            let proj = |x: &LayeredCode| {
                x.per_layer[l]
                    .iter()
                    .zip(&c.per_layer[l])
                    .zip(&u)
                    .map(|((a, b), w)| (a - b) * w)
                    .sum::<f64>()
            };
            assert!((proj(&out[2]) - 2.0).abs() < 1e-6);
            assert!((proj(&out[0]) + 2.0).abs() < 1e-6);
        }
    }
}
