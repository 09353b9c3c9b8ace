//! Latent projection: find `z` such that `G(z)` reproduces a target image.

use serde::{Deserialize, Serialize};

use crate::content::{mask_image, MaskProvider};
use crate::error::{Error, Result};
use crate::eval::lbfgs::{minimize, LbfgsConfig};
use crate::eval::perceptual::{PerceptualDistance, PerceptualMetric};
use crate::eval::quality::psnr;
use crate::model::Generator;
use crate::tensor::{seeded_rng, Tensor};

/// Images live in `[-1, 1]`.
pub const DATA_RANGE: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    /// Quasi-Newton iterations.
    pub steps: usize,
    pub pixel_weight: f64,
    pub perceptual_weight: f64,
    /// Latents averaged for the starting point.
    pub init_samples: usize,
    pub seed: u64,
    pub history: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            pixel_weight: 1.0,
            perceptual_weight: 1.0,
            init_samples: 1000,
            seed: 0,
            history: 10,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ProjectionResult {
    pub latent: Vec<f64>,
    #[serde(skip)]
    pub image: Tensor<f32>,
    /// Objective after each optimizer iteration.
    pub trace: Vec<f64>,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub initial_psnr: f64,
    pub psnr: f64,
    pub initial_perceptual: f64,
    pub perceptual: f64,
    pub ca_psnr: f64,
    pub ca_perceptual: f64,
    /// Whether the first attempt diverged and a random restart was used.
    pub restarted: bool,
}

fn batch1(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    Tensor::stack(std::slice::from_ref(image))
}

fn to_latent(z: &[f64]) -> Result<Tensor<f32>> {
    Tensor::from_vec(&[1, z.len()], z.iter().map(|&v| v as f32).collect())
}

/// `w_pix · mean|G(z) − x| + w_per · d(x, G(z))` and its gradient in `z`.
pub fn projection_objective(
    g: &Generator<f32>,
    metric: &PerceptualMetric<f32>,
    target: &Tensor<f32>,
    cfg: &ProjectionConfig,
    z: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let fwd = g.forward(&to_latent(z)?)?;
    let y = &fwd.images;
    if y.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "target {:?} vs generated {:?}",
            target.shape(),
            y.shape()
        )));
    }
    let n = y.len() as f64;
    let pix = y
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).abs() as f64)
        .sum::<f64>()
        / n;
    let k = (cfg.pixel_weight / n) as f32;
    let mut grad = y.zip_map(target, |a, b| {
        if a > b {
            k
        } else if a < b {
            -k
        } else {
            0.0
        }
    })?;
    let mut value = cfg.pixel_weight * pix;
    if cfg.perceptual_weight > 0.0 {
        let (d, gp) = metric.distances_with_grad(target, y)?;
        value += cfg.perceptual_weight * d[0];
        grad.axpy(cfg.perceptual_weight as f32, &gp);
    }
    let gz = g
        .backward(&fwd, &grad, None, true)
        .latent()
        .expect("latent gradient");
    Ok((value, gz.data().iter().map(|&v| v as f64).collect()))
}

/// Mean of `count` prior samples, the usual starting point for projection.
pub fn mean_latent(latent_dim: usize, count: usize, seed: u64) -> Vec<f64> {
    let z = Tensor::<f64>::randn(&[count.max(1), latent_dim], 1.0, &mut seeded_rng(seed));
    (0..latent_dim)
        .map(|j| {
            (0..count.max(1))
                .map(|i| z.data()[i * latent_dim + j])
                .sum::<f64>()
                / count.max(1) as f64
        })
        .collect()
}

/// Projects a `(c, h, w)` target; CA metrics use the mask parsed from the target
/// and applied to both images.
pub fn project_image(
    g: &Generator<f32>,
    target: &Tensor<f32>,
    metric: &PerceptualMetric<f32>,
    provider: &dyn MaskProvider,
    cfg: &ProjectionConfig,
) -> Result<ProjectionResult> {
    if cfg.steps == 0 {
        return Err(Error::Validation(
            "projection needs at least one step".into(),
        ));
    }
    let x = batch1(target)?;
    let lcfg = LbfgsConfig {
        max_iters: cfg.steps,
        history: cfg.history,
        ..LbfgsConfig::default()
    };
    let z0 = mean_latent(g.latent_dim(), cfg.init_samples, cfg.seed);
    let objective = |z: &[f64]| projection_objective(g, metric, &x, cfg, z);
    let (run, start, restarted) = match minimize(objective, &z0, &lcfg) {
        Ok(r) if r.value.is_finite() => (r, z0, false),
        Ok(_) | Err(Error::Numerical(_)) => {
            log::warn!("projection diverged; restarting from a random latent");
            let z1 =
                Tensor::<f64>::randn(&[g.latent_dim()], 1.0, &mut seeded_rng(cfg.seed ^ 0xD1CE))
                    .into_data();
            let r = minimize(
                |z: &[f64]| projection_objective(g, metric, &x, cfg, z),
                &z1,
                &lcfg,
            )?;
            if !r.value.is_finite() {
                return Err(Error::Numerical("projection diverged twice".into()));
            }
            (r, z1, true)
        }
        Err(e) => return Err(e),
    };
    let start_img = g.generate(&to_latent(&start)?)?;
    let image = g.generate(&to_latent(&run.x)?)?;
    let mask = provider.mask(target)?;
    let tm = batch1(&mask_image(target, &mask)?)?;
    let pm = batch1(&mask_image(&image.index0(0), &mask)?)?;
    Ok(ProjectionResult {
        latent: run.x,
        initial_objective: run.initial,
        final_objective: run.value,
        initial_psnr: psnr(&start_img, &x, DATA_RANGE)?,
        psnr: psnr(&image, &x, DATA_RANGE)?,
        initial_perceptual: metric.distances(&x, &start_img)?[0],
        perceptual: metric.distances(&x, &image)?[0],
        ca_psnr: psnr(&pm, &tm, DATA_RANGE)?,
        ca_perceptual: metric.distances(&tm, &pm)?[0],
        image: image.index0(0),
        trace: run.trace,
        restarted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::content::AllPixels;
    use crate::model::{ConvEncoder, EncoderSpec, GeneratorSpec};

    fn setup() -> (Generator<f32>, PerceptualMetric<f32>) {
        let g = Generator::new(GeneratorSpec::toy(8, [8, 8, 4]), 3).unwrap();
        let m =
            PerceptualMetric::unit(ConvEncoder::new(EncoderSpec::toy_classifier(3), 1).unwrap());
        (g, m)
    }

    #[test]
    fn one_step_gives_one_trace_entry_and_identity_mask_matches() {
        let (g, m) = setup();
        let target = g
            .generate(&Tensor::randn(&[1, 8], 1.0, &mut seeded_rng(5)))
            .unwrap()
            .index0(0);
        let cfg = ProjectionConfig {
            steps: 1,
            init_samples: 50,
            ..ProjectionConfig::default()
        };
        let r = project_image(&g, &target, &m, &AllPixels, &cfg).unwrap();
        assert_eq!(r.trace.len(), 1);
        assert!((r.ca_psnr - r.psnr).abs() < 1e-9);
        assert!((r.ca_perceptual - r.perceptual).abs() < 1e-9);
        assert!(r.final_objective <= r.initial_objective);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let (g, m) = setup();
        let target = batch1(
            &g.generate(&Tensor::randn(&[1, 8], 1.0, &mut seeded_rng(6)))
                .unwrap()
                .index0(0),
        )
        .unwrap();
        let cfg = ProjectionConfig {
            pixel_weight: 0.0,
            ..ProjectionConfig::default()
        };
        let z: Vec<f64> = (0..8).map(|i| 0.3 * i as f64 - 1.0).collect();
        let (_, grad) = projection_objective(&g, &m, &target, &cfg, &z).unwrap();
        for j in 0..8 {
            let h = 1e-2;
            let mut zp = z.clone();
            zp[j] += h;
            let mut zm = z.clone();
            zm[j] -= h;
            let fd = (projection_objective(&g, &m, &target, &cfg, &zp).unwrap().0
                - projection_objective(&g, &m, &target, &cfg, &zm).unwrap().0)
                / (2.0 * h);
            assert!(
                (fd - grad[j]).abs() < 2e-2 * (1.0 + grad[j].abs()) + 1e-3,
                "{j}: {fd} vs {}",
                grad[j]
            );
        }
    }

    #[test]
    fn zero_steps_rejected() {
        let (g, m) = setup();
        let target = Tensor::zeros(&[3, 32, 32]);
        let cfg = ProjectionConfig {
            steps: 0,
            ..ProjectionConfig::default()
        };
        assert!(project_image(&g, &target, &m, &AllPixels, &cfg).is_err());
    }
}
