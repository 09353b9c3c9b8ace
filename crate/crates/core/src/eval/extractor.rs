//! Small classifier standing in for a pretrained recognition network.
//!
//! It provides class posteriors (for the inception score), a pooled feature vector
//! (for FID) and the feature maps used by the perceptual metric and CAM masks.

use nalgebra::DMatrix;
use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::perceptual::PerceptualMetric;
use crate::model::{ConvEncoder, EncoderSpec, ModelCheckpoint};
use crate::nn::{Adam, AdamConfig};
use crate::tensor::{seeded_rng, Tensor};

const BUNDLED: &[u8] = include_bytes!("../../data/feature_net.ckpt");

#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub net: ConvEncoder<f32>,
}

/// Per-image outputs of the extractor.
#[derive(Clone, Debug)]
pub struct Embedding {
    /// `(n, feature_dim)`: spatial means of every block's feature maps, concatenated.
    pub features: DMatrix<f64>,
    /// Softmax class posteriors, one row per image.
    pub probs: Vec<Vec<f64>>,
}

fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = logits.iter().map(|&l| (l as f64 - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl FeatureExtractor {
    pub fn new(net: ConvEncoder<f32>) -> Result<Self> {
        if net.spec.outputs < 2 {
            return Err(Error::Validation(
                "feature extractor needs at least two classes".into(),
            ));
        }
        Ok(Self { net })
    }

    /// The network shipped with the crate, trained on the default toy dataset.
    pub fn bundled() -> Self {
        let ck = ModelCheckpoint::from_bytes(BUNDLED).expect("bundled feature network is valid");
        Self {
            net: ck.to_encoder().expect("bundled checkpoint is an encoder"),
        }
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::new(ModelCheckpoint::load(path)?.to_encoder()?)
    }

    pub fn feature_dim(&self) -> usize {
        self.net.spec.layers.iter().map(|l| l.out_channels).sum()
    }

    pub fn num_classes(&self) -> usize {
        self.net.spec.outputs
    }

    /// Perceptual metric over the same network with unit block weights.
    pub fn perceptual(&self) -> PerceptualMetric<f32> {
        PerceptualMetric::unit(self.net.clone())
    }

    /// Features and posteriors for `(n, c, h, w)` images, processed `batch` at a time
    /// and reduced in index order.
    pub fn embed(&self, images: &Tensor<f32>, batch: usize) -> Result<Embedding> {
        let (n, ..) = images.dims4()?;
        let d = self.feature_dim();
        let mut features = DMatrix::zeros(n, d);
        let mut probs = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let idx: Vec<usize> = (start..(start + batch.max(1)).min(n)).collect();
            let fwd = self.net.forward(&images.gather0(&idx))?;
            for (row, &i) in idx.iter().enumerate() {
                let mut col = 0;
                for f in &fwd.features {
                    let (_, c, h, w) = f.dims4()?;
                    let hw = h * w;
                    let img = f.slice0(row);
                    for ch in 0..c {
                        features[(i, col)] = img[ch * hw..(ch + 1) * hw]
                            .iter()
                            .map(|&v| v as f64)
                            .sum::<f64>()
                            / hw as f64;
                        col += 1;
                    }
                }
                probs.push(softmax(fwd.logits.slice0(row)));
            }
            start += idx.len();
        }
        Ok(Embedding { features, probs })
    }

    /// Fraction of images whose arg-max class equals the label.
    pub fn accuracy(&self, images: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
        let emb = self.embed(images, 64)?;
        let hits = emb
            .probs
            .iter()
            .zip(labels)
            .filter(|(p, &l)| (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b }) == l)
            .count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ExtractorTraining {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Trains a fresh classifier on labelled images with softmax cross-entropy.
pub fn train_extractor(
    images: &Tensor<f32>,
    labels: &[usize],
    num_classes: usize,
    cfg: &ExtractorTraining,
) -> Result<FeatureExtractor> {
    let (n, _, h, _) = images.dims4()?;
    if n == 0 || labels.len() != n {
        return Err(Error::Validation(format!(
            "{} labels for {n} images",
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l >= num_classes) {
        return Err(Error::Validation("label out of range".into()));
    }
    let mut spec = EncoderSpec::toy_classifier(num_classes);
    spec.resolution = h;
    let mut net = ConvEncoder::<f32>::new(spec, cfg.seed)?;
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    });
    let mut rng = seeded_rng(cfg.seed ^ 0x5EED);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..n))
            .collect();
        let fwd = net.forward(&images.gather0(&idx))?;
        let b = idx.len();
        let mut grad = Tensor::<f32>::zeros(&[b, num_classes]);
        let mut loss = 0.0;
        for (row, &i) in idx.iter().enumerate() {
            let p = softmax(fwd.logits.slice0(row));
            loss -= p[labels[i]].max(1e-300).ln() / b as f64;
            let g = grad.slice0_mut(row);
            for (k, gk) in g.iter_mut().enumerate() {
                *gk = ((p[k] - (k == labels[i]) as u8 as f64) / b as f64) as f32;
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "classifier loss diverged at step {step}"
            )));
        }
        let (grads, _) = net.backward(&fwd, Some(&grad), None, false);
        opt.step(&mut net.params, &grads);
        if step % 250 == 0 {
            log::info!("extractor step {step}: loss {loss:.4}");
        }
    }
    FeatureExtractor::new(net)
}
