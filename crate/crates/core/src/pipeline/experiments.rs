//! Seeded prune-then-fine-tune comparisons across saliency metrics and
//! distillation regimes, scored by FID on the feature extractor.

use std::collections::BTreeMap;

use log::info;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::content::MaskProvider;
use crate::distill::{
    distill_loop, DistillConfig, DistillInputs, DistillOutcome, LoopOutputs, Regime,
};
use crate::error::{Error, Result};
use crate::eval::extractor::FeatureExtractor;
use crate::eval::fid::fid;
use crate::eval::perceptual::PerceptualMetric;
use crate::eval::report::sample_images;
use crate::model::{
    init_student_discriminator, remove_channels, ConvEncoder, Discriminator, Generator,
};
use crate::pipeline::config::{ModelConfig, TeacherConfig};
use crate::pruning::{compute_saliency, select_channels, CaConfig, Metric};
use crate::tensor::Tensor;

/// Trains the full-size GAN from seeded initializations.
pub fn train_teacher(
    dataset: &Tensor<f32>,
    model: &ModelConfig,
    teacher: &TeacherConfig,
    seed: u64,
    outputs: &LoopOutputs,
) -> Result<DistillOutcome> {
    let g = Generator::new(model.generator_spec(), seed)?;
    let d = ConvEncoder::new(model.discriminator_spec(), seed ^ 0xD15C)?;
    let inputs = DistillInputs {
        teacher: None,
        dataset,
        mask_provider: None,
        perceptual: None,
    };
    distill_loop(g, d, &inputs, &teacher.to_distill(seed), outputs)
}

/// Shared inputs of every trial.
pub struct ExperimentSetup<'a> {
    pub teacher: &'a Generator<f32>,
    pub teacher_d: &'a Discriminator<f32>,
    pub dataset: &'a Tensor<f32>,
    pub extractor: &'a FeatureExtractor,
    pub provider: &'a dyn MaskProvider,
    pub perceptual: &'a PerceptualMetric<f32>,
    pub ratio: f64,
    pub ca: CaConfig,
    /// Fine-tuning settings; `seed` is replaced per trial.
    pub distill: DistillConfig,
    pub fid_samples: usize,
    real_features: DMatrix<f64>,
}

impl<'a> ExperimentSetup<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        teacher: &'a Generator<f32>,
        teacher_d: &'a Discriminator<f32>,
        dataset: &'a Tensor<f32>,
        extractor: &'a FeatureExtractor,
        provider: &'a dyn MaskProvider,
        perceptual: &'a PerceptualMetric<f32>,
        ratio: f64,
        distill: DistillConfig,
        fid_samples: usize,
    ) -> Result<Self> {
        let real_features = extractor.embed(dataset, 64)?.features;
        Ok(Self {
            teacher,
            teacher_d,
            dataset,
            extractor,
            provider,
            perceptual,
            ratio,
            ca: CaConfig::default(),
            distill,
            fid_samples,
            real_features,
        })
    }

    /// FID of `g` against the dataset. Samples come from a latent set fixed per
    /// `seed`, so models compared under one seed see the same latents.
    pub fn fid(&self, g: &Generator<f32>, seed: u64) -> Result<f64> {
        let fake = sample_images(g, self.fid_samples, seed ^ 0xF1D, 64)?;
        fid(
            &self.real_features,
            &self.extractor.embed(&fake, 64)?.features,
        )
    }

    pub fn prune(&self, metric: Metric, seed: u64) -> Result<Generator<f32>> {
        let ca = CaConfig {
            seed,
            ..self.ca.clone()
        };
        let saliency = compute_saliency(self.teacher, metric, self.provider, &ca)?;
        remove_channels(self.teacher, &select_channels(&saliency, self.ratio)?)
    }

    pub fn finetune(
        &self,
        student: Generator<f32>,
        cfg: &DistillConfig,
        seed: u64,
    ) -> Result<Generator<f32>> {
        let cfg = DistillConfig {
            seed,
            ..cfg.clone()
        };
        let inputs = DistillInputs {
            teacher: cfg.kd_active().then_some(self.teacher),
            dataset: self.dataset,
            mask_provider: cfg.content_aware.then_some(self.provider),
            perceptual: cfg.perceptual_active().then_some(self.perceptual),
        };
        let disc = init_student_discriminator(self.teacher_d);
        Ok(distill_loop(student, disc, &inputs, &cfg, &LoopOutputs::default())?.student)
    }

    /// Prunes with `metric`, fine-tunes under `cfg` and scores the result.
    pub fn trial(
        &self,
        label: &str,
        metric: Metric,
        cfg: &DistillConfig,
        seed: u64,
    ) -> Result<Trial> {
        let student = self.finetune(self.prune(metric, seed)?, cfg, seed)?;
        let fid = self.fid(&student, seed)?;
        info!("{label} seed {seed}: FID {fid:.4}");
        Ok(Trial {
            label: label.into(),
            seed,
            fid,
        })
    }

    /// One trial per metric and seed under the base fine-tuning config.
    pub fn compare_metrics(&self, metrics: &[Metric], seeds: &[u64]) -> Result<Vec<Trial>> {
        let mut out = Vec::new();
        for &seed in seeds {
            for &m in metrics {
                out.push(self.trial(m.as_str(), m, &self.distill, seed)?);
            }
        }
        Ok(out)
    }

    /// One trial per regime and seed, all pruned with `metric`.
    pub fn compare_regimes(
        &self,
        metric: Metric,
        regimes: &[Regime],
        seeds: &[u64],
    ) -> Result<Vec<Trial>> {
        let mut out = Vec::new();
        for &seed in seeds {
            for &r in regimes {
                let cfg = self
                    .distill
                    .clone()
                    .with_regime(r, self.distill.content_aware);
                out.push(self.trial(r.as_str(), metric, &cfg, seed)?);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub label: String,
    pub seed: u64,
    pub fid: f64,
}

/// Mean FID per label.
pub fn mean_fid(trials: &[Trial]) -> Result<BTreeMap<String, f64>> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for t in trials {
        if !t.fid.is_finite() {
            return Err(Error::Numerical(format!(
                "{} seed {}: FID {}",
                t.label, t.seed, t.fid
            )));
        }
        let e = sums.entry(t.label.clone()).or_default();
        e.0 += t.fid;
        e.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn means_group_by_label() {
        let t = |label: &str, seed, fid| Trial {
            label: label.into(),
            seed,
            fid,
        };
        let m = mean_fid(&[t("a", 0, 1.0), t("b", 0, 4.0), t("a", 1, 3.0)]).unwrap();
        assert_eq!(m["a"], 2.0);
        assert_eq!(m["b"], 4.0);
        assert!(mean_fid(&[t("a", 0, f64::NAN)]).is_err());
    }
}
