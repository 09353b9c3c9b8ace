//! Run configuration, read from and dumped to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::content::{AllPixels, CamMask, FixedMask, MaskProvider, OracleMask};
use crate::dataset::DatasetConfig;
use crate::distill::{DistillConfig, GanLoss};
use crate::error::{Error, Result};
use crate::eval::extractor::FeatureExtractor;
use crate::eval::report::EvalConfig;
use crate::model::{EncoderSpec, GeneratorSpec};
use crate::nn::AdamConfig;
use crate::pruning::{CaConfig, Metric};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    /// Output channels of the three upsampling layers.
    pub generator_widths: [usize; 3],
    pub discriminator_widths: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            generator_widths: [32, 32, 16],
            discriminator_widths: [16, 32, 32],
        }
    }
}

impl ModelConfig {
    pub fn generator_spec(&self) -> GeneratorSpec {
        GeneratorSpec::toy(self.latent_dim, self.generator_widths)
    }

    pub fn discriminator_spec(&self) -> EncoderSpec {
        EncoderSpec::toy_discriminator(self.discriminator_widths)
    }
}

/// Plain adversarial training of the full-size model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub gan_loss: GanLoss,
    pub g_optimizer: AdamConfig,
    pub d_optimizer: AdamConfig,
    pub d_every: usize,
    pub d_steps: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        let base = DistillConfig::gan_only();
        Self {
            steps: 8000,
            batch_size: base.batch_size,
            gan_loss: base.gan_loss,
            g_optimizer: base.g_optimizer,
            d_optimizer: base.d_optimizer,
            d_every: base.d_every,
            d_steps: base.d_steps,
            checkpoint_every: 0,
            log_every: 500,
        }
    }
}

impl TeacherConfig {
    pub fn to_distill(&self, seed: u64) -> DistillConfig {
        DistillConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            gan_loss: self.gan_loss,
            g_optimizer: self.g_optimizer,
            d_optimizer: self.d_optimizer,
            d_every: self.d_every,
            d_steps: self.d_steps,
            checkpoint_every: self.checkpoint_every,
            log_every: self.log_every,
            seed,
            ..DistillConfig::gan_only()
        }
    }
}

/// Where content masks come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskSource {
    /// Luminance threshold plus largest component; exact on the toy renderer.
    Oracle { threshold: f32 },
    /// Thresholded class activation map of the feature extractor.
    Cam { fraction: f32 },
    /// One fixed mask image applied to every sample.
    File { path: PathBuf },
    /// Every pixel is content.
    All,
}

impl Default for MaskSource {
    fn default() -> Self {
        MaskSource::Oracle {
            threshold: OracleMask::default().threshold,
        }
    }
}

impl MaskSource {
    pub fn provider(&self, extractor: &FeatureExtractor) -> Result<Box<dyn MaskProvider>> {
        Ok(match self {
            MaskSource::Oracle { threshold } => Box::new(OracleMask {
                threshold: *threshold,
            }),
            MaskSource::Cam { fraction } => {
                Box::new(CamMask::new(extractor.net.clone(), *fraction)?)
            }
            MaskSource::File { path } => Box::new(FixedMask::load(path)?),
            MaskSource::All => Box::new(AllPixels),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruningConfig {
    pub metric: Metric,
    /// Fraction of channels removed from every prunable layer.
    pub ratio: f64,
    pub ca: CaConfig,
}

impl Default for PruningConfig {
    fn default() -> Self {
        Self {
            metric: Metric::CaL1Out,
            ratio: 0.5,
            ca: CaConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditConfig {
    /// Frames in the morph strip, endpoints included.
    pub morph_frames: usize,
    pub sigmas: Vec<f64>,
    /// Principal directions traversed.
    pub components: usize,
    /// Prior latents used to fit the directions.
    pub pca_samples: usize,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            morph_frames: 9,
            sigmas: vec![-3.0, -1.5, 0.0, 1.5, 3.0],
            components: 3,
            pca_samples: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub output_dir: PathBuf,
    /// Drives every stage except dataset rendering, which has its own seed.
    pub seed: u64,
    /// Feature network checkpoint; the bundled one when absent.
    pub extractor: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub teacher: TeacherConfig,
    pub masks: MaskSource,
    pub pruning: PruningConfig,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
    pub edit: EditConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            output_dir: PathBuf::from("runs"),
            seed: 0,
            extractor: None,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            teacher: TeacherConfig::default(),
            masks: MaskSource::default(),
            pruning: PruningConfig::default(),
            distill: DistillConfig::default(),
            eval: EvalConfig::default(),
            edit: EditConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Validation(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    /// Copies the global seed into every stage section.
    pub fn resolved(mut self) -> Self {
        self.pruning.ca.seed = self.seed;
        self.pruning.ca.noise.seed = self.seed;
        self.distill.seed = self.seed;
        self.eval.seed = self.seed;
        self.eval.projection.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty()
            || self.name.contains(['/', '\\'])
            || self.name == "."
            || self.name == ".."
        {
            return Err(Error::Validation(format!(
                "run name {:?} is not a plain directory name",
                self.name
            )));
        }
        self.dataset.validate()?;
        self.model.generator_spec().validate()?;
        self.model.discriminator_spec().validate()?;
        if self.dataset.resolution != self.model.generator_spec().output_resolution {
            return Err(Error::Validation(format!(
                "dataset resolution {} does not match the generator output {}",
                self.dataset.resolution,
                self.model.generator_spec().output_resolution
            )));
        }
        self.teacher.to_distill(self.seed).validate()?;
        if !(0.0..1.0).contains(&self.pruning.ratio) {
            return Err(Error::Validation(format!(
                "pruning ratio {} outside [0, 1)",
                self.pruning.ratio
            )));
        }
        if self.pruning.ca.num_samples == 0 || self.pruning.ca.batch_size == 0 {
            return Err(Error::Validation(
                "pruning sample and batch counts must be positive".into(),
            ));
        }
        self.pruning.ca.noise.validate()?;
        self.distill.validate()?;
        if self.eval.num_samples < 2 || self.eval.batch_size == 0 || self.eval.is_splits == 0 {
            return Err(Error::Validation(
                "eval needs at least two samples, one split and a positive batch".into(),
            ));
        }
        if self.edit.morph_frames < 2
            || self.edit.components == 0
            || self.edit.components > self.model.latent_dim
            || self.edit.pca_samples <= self.edit.components
        {
            return Err(Error::Validation(
                "edit needs two morph frames and more PCA samples than components".into(),
            ));
        }
        for path in self.extractor.iter().chain(match &self.masks {
            MaskSource::File { path } => Some(path),
            _ => None,
        }) {
            if !path.exists() {
                return Err(Error::Validation(format!(
                    "referenced file {} does not exist",
                    path.display()
                )));
            }
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }

    pub fn load_extractor(&self) -> Result<FeatureExtractor> {
        match &self.extractor {
            Some(path) => FeatureExtractor::load(path),
            None => Ok(FeatureExtractor::bundled()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let cfg = RunConfig::default().resolved();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_config_uses_defaults() {
        let cfg = RunConfig::from_toml("name = \"x\"\nseed = 4\n[pruning]\nmetric = \"l1_out\"\n[masks]\nkind = \"cam\"\nfraction = 0.3\n").unwrap();
        assert_eq!(cfg.pruning.metric, Metric::L1Out);
        assert_eq!(cfg.pruning.ratio, 0.5);
        assert_eq!(cfg.masks, MaskSource::Cam { fraction: 0.3 });
        let r = cfg.resolved();
        assert_eq!((r.distill.seed, r.pruning.ca.seed, r.eval.seed), (4, 4, 4));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        let bad = |f: fn(&mut RunConfig)| {
            let mut c = RunConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.name = "a/b".into()));
        assert!(bad(|c| c.dataset.count = 0));
        assert!(bad(|c| c.pruning.ratio = 1.0));
        assert!(bad(|c| c.dataset.resolution = 16));
        assert!(bad(|c| c.extractor = Some("/no/such/file".into())));
        assert!(bad(|c| c.masks = MaskSource::File {
            path: "/no/such/mask.png".into()
        }));
    }
}
