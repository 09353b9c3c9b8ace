//! Learned-feature perceptual distance.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ConvEncoder;
use crate::tensor::{Real, Tensor};

const NORM_EPS: f64 = 1e-10;

/// A per-image distance between two equally shaped image batches.
pub trait PerceptualDistance<T: Real> {
    /// Distances `d(a_i, b_i)` for every image pair of two `(n, c, h, w)` batches.
    fn distances(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<f64>>;
}

/// Distance over the block outputs of a fixed encoder.
///
/// Each block's features are normalized to unit length along the channel axis at
/// every spatial position; the per-block distance is the spatial mean of the squared
/// difference summed over channels, and blocks are combined with `layer_weights`.
#[derive(Clone, Debug)]
pub struct PerceptualMetric<T = f32> {
    pub net: ConvEncoder<T>,
    pub layer_weights: Vec<f64>,
}

struct Normalized<T> {
    unit: Tensor<T>,
    norms: Vec<f64>,
}

fn normalize<T: Real>(f: &Tensor<T>) -> Normalized<T> {
    let (n, c, h, w) = f.dims4().expect("4-D features");
    let hw = h * w;
    let mut unit = f.clone();
    let mut norms = vec![0.0; n * hw];
    for i in 0..n {
        let img = unit.slice0_mut(i);
        for p in 0..hw {
            let norm = (0..c)
                .map(|ch| img[ch * hw + p].as_f64().powi(2))
                .sum::<f64>()
                .sqrt();
            norms[i * hw + p] = norm;
            let inv = T::of(1.0 / (norm + NORM_EPS));
            for ch in 0..c {
                img[ch * hw + p] *= inv;
            }
        }
    }
    Normalized { unit, norms }
}

impl<T: Real> PerceptualMetric<T> {
    pub fn new(net: ConvEncoder<T>, layer_weights: Vec<f64>) -> Result<Self> {
        if layer_weights.len() != net.spec.layers.len() {
            return Err(Error::Validation(format!(
                "{} layer weights for {} blocks",
                layer_weights.len(),
                net.spec.layers.len()
            )));
        }
        if layer_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Validation(
                "layer weights must be finite and non-negative".into(),
            ));
        }
        Ok(Self { net, layer_weights })
    }

    /// Every block weighted 1.
    pub fn unit(net: ConvEncoder<T>) -> Self {
        let k = net.spec.layers.len();
        Self {
            net,
            layer_weights: vec![1.0; k],
        }
    }

    fn check(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
        a.dims4()?;
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!(
                "perceptual distance of {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        Ok(())
    }

    /// Distances plus the gradient of `Σ_i d(a_i, b_i)` with respect to `b`.
    pub fn distances_with_grad(
        &self,
        a: &Tensor<T>,
        b: &Tensor<T>,
    ) -> Result<(Vec<f64>, Tensor<T>)> {
        Self::check(a, b)?;
        let n = a.dim(0);
        let fa = self.net.forward(a)?;
        let fb = self.net.forward(b)?;
        let mut dist = vec![0.0; n];
        let mut grads = BTreeMap::new();
        for (l, &weight) in self.layer_weights.iter().enumerate() {
            if weight == 0.0 {
                continue;
            }
            let na = normalize(&fa.features[l]);
            let nb = normalize(&fb.features[l]);
            let (_, c, h, w) = fb.features[l].dims4()?;
            let hw = h * w;
            let scale = weight / hw as f64;
            let mut g = Tensor::<T>::zeros(fb.features[l].shape());
            for (i, di) in dist.iter_mut().enumerate() {
                let ua = na.unit.slice0(i);
                let ub = nb.unit.slice0(i);
                let raw = fb.features[l].slice0(i);
                let gi = g.slice0_mut(i);
                for p in 0..hw {
                    let mut sq = 0.0;
                    let mut dot = 0.0;
                    for ch in 0..c {
                        let k = ch * hw + p;
                        let diff = ub[k].as_f64() - ua[k].as_f64();
                        sq += diff * diff;
                        dot += raw[k].as_f64() * diff;
                    }
                    *di += scale * sq;
                    // d/du of |u/(|u|+eps) - â|² at u = raw feature vector
                    let norm = nb.norms[i * hw + p];
                    let s = norm + NORM_EPS;
                    let radial = if norm > 0.0 {
                        dot / (s * s * norm)
                    } else {
                        0.0
                    };
                    for ch in 0..c {
                        let k = ch * hw + p;
                        let diff = ub[k].as_f64() - ua[k].as_f64();
                        gi[k] = T::of(2.0 * scale * (diff / s - raw[k].as_f64() * radial));
                    }
                }
            }
            grads.insert(l, g);
        }
        let grad = if grads.is_empty() {
            Tensor::zeros(b.shape())
        } else {
            self.net
                .backward(&fb, None, Some(&grads), true)
                .1
                .expect("input gradient")
        };
        Ok((dist, grad))
    }
}

impl<T: Real> PerceptualDistance<T> for PerceptualMetric<T> {
    fn distances(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<f64>> {
        Self::check(a, b)?;
        let n = a.dim(0);
        let fa = self.net.forward(a)?;
        let fb = self.net.forward(b)?;
        let mut dist = vec![0.0; n];
        for (l, &weight) in self.layer_weights.iter().enumerate() {
            if weight == 0.0 {
                continue;
            }
            let ua = normalize(&fa.features[l]).unit;
            let ub = normalize(&fb.features[l]).unit;
            let (_, c, h, w) = ua.dims4()?;
            let hw = h * w;
            for (i, d) in dist.iter_mut().enumerate() {
                let (x, y) = (ua.slice0(i), ub.slice0(i));
                let sq: f64 = (0..c * hw)
                    .map(|k| (x[k].as_f64() - y[k].as_f64()).powi(2))
                    .sum();
                *d += weight * sq / hw as f64;
            }
        }
        Ok(dist)
    }
}

/// Mean squared pixel difference per image; a simple reference distance.
#[derive(Clone, Copy, Debug, Default)]
pub struct PixelMse;

impl<T: Real> PerceptualDistance<T> for PixelMse {
    fn distances(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<f64>> {
        let (n, ..) = a.dims4()?;
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok((0..n)
            .map(|i| {
                let (x, y) = (a.slice0(i), b.slice0(i));
                x.iter()
                    .zip(y)
                    .map(|(p, q)| (p.as_f64() - q.as_f64()).powi(2))
                    .sum::<f64>()
                    / x.len() as f64
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderSpec;
    use crate::tensor::seeded_rng;

    fn metric() -> PerceptualMetric<f64> {
        PerceptualMetric::unit(ConvEncoder::new(EncoderSpec::toy_classifier(3), 4).unwrap())
    }

    #[test]
    fn metric_axioms_on_random_pairs() {
        let m = metric();
        let mut rng = seeded_rng(1);
        let a = Tensor::<f64>::randn(&[6, 3, 32, 32], 0.5, &mut rng);
        let b = Tensor::<f64>::randn(&[6, 3, 32, 32], 0.5, &mut rng);
        let ab = m.distances(&a, &b).unwrap();
        let ba = m.distances(&b, &a).unwrap();
        let aa = m.distances(&a, &a).unwrap();
        for i in 0..6 {
            assert!(ab[i] > 0.0);
            assert!((ab[i] - ba[i]).abs() < 1e-12);
            assert_eq!(aa[i], 0.0);
        }
        let (with_grad, _) = m.distances_with_grad(&a, &b).unwrap();
        for (x, y) in ab.iter().zip(&with_grad) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = metric();
        let mut rng = seeded_rng(2);
        let a = Tensor::<f64>::randn(&[2, 3, 32, 32], 0.5, &mut rng);
        let b = Tensor::<f64>::randn(&[2, 3, 32, 32], 0.5, &mut rng);
        let (_, grad) = m.distances_with_grad(&a, &b).unwrap();
        let total = |x: &Tensor<f64>| m.distances(&a, x).unwrap().iter().sum::<f64>();
        let h = 1e-6;
        for idx in (0..b.len()).step_by(97) {
            let mut plus = b.clone();
            plus.data_mut()[idx] += h;
            let mut minus = b.clone();
            minus.data_mut()[idx] -= h;
            let fd = (total(&plus) - total(&minus)) / (2.0 * h);
            let an = grad.data()[idx];
            assert!(
                (fd - an).abs() <= 1e-5 * (1.0 + an.abs()),
                "entry {idx}: fd {fd} vs {an}"
            );
        }
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let m = metric();
        let a = Tensor::<f64>::zeros(&[1, 3, 32, 32]);
        let b = Tensor::<f64>::zeros(&[2, 3, 32, 32]);
        assert!(m.distances(&a, &b).is_err());
        assert!(PerceptualMetric::new(m.net.clone(), vec![1.0]).is_err());
    }
}
