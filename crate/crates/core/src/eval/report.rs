//! The full metric bundle for one generator.

use serde::{Deserialize, Serialize};

use crate::content::MaskProvider;
use crate::error::{Error, Result};
use crate::eval::extractor::FeatureExtractor;
use crate::eval::fid::fid;
use crate::eval::inception::inception_score_from_probs;
use crate::eval::perceptual::PerceptualMetric;
use crate::eval::ppl::ppl;
use crate::eval::projection::{project_image, ProjectionConfig, ProjectionResult};
use crate::eval::quality::flops_estimate;
use crate::model::Generator;
use crate::tensor::{seeded_rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Generated images for FID and IS.
    pub num_samples: usize,
    pub is_splits: usize,
    pub ppl_pairs: usize,
    pub ppl_epsilon: f64,
    /// Held-out real images to project.
    pub projection_targets: usize,
    pub projection: ProjectionConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            num_samples: 2000,
            is_splits: 10,
            ppl_pairs: 256,
            ppl_epsilon: 1e-4,
            projection_targets: 16,
            projection: ProjectionConfig::default(),
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fid: f64,
    pub is_mean: f64,
    pub is_std: f64,
    pub ppl: f64,
    pub psnr_mean: f64,
    pub perceptual_mean: f64,
    pub ca_psnr_mean: f64,
    pub ca_perceptual_mean: f64,
    pub flops_estimate: u64,
    pub param_count: usize,
    pub config: EvalConfig,
}

impl EvalReport {
    pub fn all_finite(&self) -> bool {
        [
            self.fid,
            self.is_mean,
            self.is_std,
            self.ppl,
            self.psnr_mean,
            self.perceptual_mean,
            self.ca_psnr_mean,
            self.ca_perceptual_mean,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Images from `num` prior latents drawn with `seed`, generated `batch` at a time.
pub fn sample_images(
    g: &Generator<f32>,
    num: usize,
    seed: u64,
    batch: usize,
) -> Result<Tensor<f32>> {
    let z = Tensor::<f32>::randn(&[num, g.latent_dim()], 1.0, &mut seeded_rng(seed));
    let mut parts = Vec::new();
    let mut start = 0;
    while start < num {
        let idx: Vec<usize> = (start..(start + batch.max(1)).min(num)).collect();
        parts.push(g.generate(&z.gather0(&idx))?);
        start += idx.len();
    }
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    Tensor::concat0(&refs)
}

/// FID of `num` generated samples against `real` on the extractor's features.
pub fn sample_fid(
    g: &Generator<f32>,
    real: &Tensor<f32>,
    extractor: &FeatureExtractor,
    num: usize,
    seed: u64,
) -> Result<f64> {
    let fake = sample_images(g, num, seed, 64)?;
    fid(
        &extractor.embed(real, 64)?.features,
        &extractor.embed(&fake, 64)?.features,
    )
}

/// Computes every metric of [`EvalReport`]; also returns the per-target projections.
pub fn evaluate(
    g: &Generator<f32>,
    real: &Tensor<f32>,
    targets: &Tensor<f32>,
    extractor: &FeatureExtractor,
    metric: &PerceptualMetric<f32>,
    provider: &dyn MaskProvider,
    cfg: &EvalConfig,
) -> Result<(EvalReport, Vec<ProjectionResult>)> {
    if cfg.num_samples < 2 {
        return Err(Error::Validation(
            "evaluation needs at least two samples".into(),
        ));
    }
    let fake = sample_images(g, cfg.num_samples, cfg.seed, cfg.batch_size)?;
    let fake_emb = extractor.embed(&fake, cfg.batch_size)?;
    let real_emb = extractor.embed(real, cfg.batch_size)?;
    let fid_value = fid(&real_emb.features, &fake_emb.features)?;
    let (is_mean, is_std) = inception_score_from_probs(&fake_emb.probs, cfg.is_splits)?;
    let ppl_value = ppl(
        g,
        metric,
        cfg.ppl_pairs,
        cfg.ppl_epsilon,
        cfg.seed ^ 0x9911,
        cfg.batch_size,
    )?;
    let (n_targets, ..) = targets.dims4()?;
    let count = cfg.projection_targets.min(n_targets);
    let mut projections = Vec::with_capacity(count);
    for i in 0..count {
        projections.push(project_image(
            g,
            &targets.index0(i),
            metric,
            provider,
            &cfg.projection,
        )?);
    }
    let mean = |f: fn(&ProjectionResult) -> f64| {
        if projections.is_empty() {
            0.0
        } else {
            projections.iter().map(f).sum::<f64>() / projections.len() as f64
        }
    };
    let report = EvalReport {
        fid: fid_value,
        is_mean,
        is_std,
        ppl: ppl_value,
        psnr_mean: mean(|p| p.psnr),
        perceptual_mean: mean(|p| p.perceptual),
        ca_psnr_mean: mean(|p| p.ca_psnr),
        ca_perceptual_mean: mean(|p| p.ca_perceptual),
        flops_estimate: flops_estimate(&g.spec)?,
        param_count: g.param_count(),
        config: cfg.clone(),
    };
    if !report.all_finite() {
        return Err(Error::Numerical(format!("non-finite metric in {report:?}")));
    }
    Ok((report, projections))
}
