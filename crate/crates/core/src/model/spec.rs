use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Activation;

/// One convolution block: optional 2× nearest upsample, a `k×k` same-padded
/// convolution, the activation, then an optional 2× average-pool downsample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    #[serde(default)]
    pub upsample: bool,
    #[serde(default)]
    pub downsample: bool,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        activation: Activation,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size,
            upsample: false,
            downsample: false,
            activation,
        }
    }

    pub fn up(mut self) -> Self {
        self.upsample = true;
        self
    }

    pub fn down(mut self) -> Self {
        self.downsample = true;
        self
    }

    fn check(&self, idx: usize) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Validation(format!("layer {idx} has zero channels")));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Validation(format!(
                "layer {idx} kernel size {} is not odd",
                self.kernel_size
            )));
        }
        Ok(())
    }
}

fn check_chain(layers: &[LayerSpec]) -> Result<()> {
    for (i, l) in layers.iter().enumerate() {
        l.check(i)?;
    }
    for (i, pair) in layers.windows(2).enumerate() {
        if pair[0].out_channels != pair[1].in_channels {
            return Err(Error::Validation(format!(
                "layer {} outputs {} channels but layer {} expects {}",
                i,
                pair[0].out_channels,
                i + 1,
                pair[1].in_channels
            )));
        }
    }
    Ok(())
}

/// Upsampling generator: a dense stem maps the latent to a
/// `layers[0].in_channels × base × base` grid, followed by the conv blocks.
/// Every block also receives its own latent vector as a per-channel bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub latent_dim: usize,
    pub base_resolution: usize,
    pub output_resolution: usize,
    pub output_channels: usize,
    pub layers: Vec<LayerSpec>,
    /// Hidden layers exposing a 1×1 projection to `output_channels`.
    pub tap_layers: BTreeSet<usize>,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Validation("generator has no layers".into()));
        }
        if self.latent_dim == 0 || self.base_resolution == 0 {
            return Err(Error::Validation(
                "latent_dim and base_resolution must be positive".into(),
            ));
        }
        check_chain(&self.layers)?;
        let last = self.layers.len() - 1;
        let out = &self.layers[last];
        if out.activation != Activation::Tanh {
            return Err(Error::Validation(
                "final layer activation must be tanh".into(),
            ));
        }
        if out.out_channels != self.output_channels {
            return Err(Error::Validation(format!(
                "final layer outputs {} channels, expected {}",
                out.out_channels, self.output_channels
            )));
        }
        if self.layers.iter().any(|l| l.downsample) {
            return Err(Error::Validation(
                "generator layers cannot downsample".into(),
            ));
        }
        let ups = self.layers.iter().filter(|l| l.upsample).count();
        if self.base_resolution << ups != self.output_resolution {
            return Err(Error::Validation(format!(
                "base {} with {ups} upsamples gives {}, expected {}",
                self.base_resolution,
                self.base_resolution << ups,
                self.output_resolution
            )));
        }
        if let Some(&t) = self.tap_layers.iter().find(|&&t| t >= last) {
            return Err(Error::Validation(format!(
                "tap layer {t} is not a hidden layer"
            )));
        }
        Ok(())
    }

    /// Spatial size of layer `t`'s output.
    pub fn layer_resolution(&self, t: usize) -> usize {
        let ups = self.layers[..=t].iter().filter(|l| l.upsample).count();
        self.base_resolution << ups
    }

    /// Layers whose output channels may be pruned (all but the output layer).
    pub fn prunable_layers(&self) -> std::ops::Range<usize> {
        0..self.layers.len().saturating_sub(1)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// 32×32 RGB generator used by the toy pipeline.
    pub fn toy(latent_dim: usize, widths: [usize; 3]) -> Self {
        let lrelu = Activation::DEFAULT_LEAKY;
        let stem = widths[0];
        Self {
            latent_dim,
            base_resolution: 4,
            output_resolution: 32,
            output_channels: 3,
            layers: vec![
                LayerSpec::new(stem, widths[0], 3, lrelu).up(),
                LayerSpec::new(widths[0], widths[1], 3, lrelu).up(),
                LayerSpec::new(widths[1], widths[2], 3, lrelu).up(),
                LayerSpec::new(widths[2], 3, 3, Activation::Tanh),
            ],
            tap_layers: [0, 1, 2].into_iter().collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Global average pool then dense; supports class activation maps.
    Gap,
    /// Flatten the last feature grid then dense.
    Flatten,
}

/// Downsampling conv stack with a dense head. Used for discriminators
/// (one output) and for the evaluation classifier (one output per class).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub input_channels: usize,
    pub resolution: usize,
    pub layers: Vec<LayerSpec>,
    pub head: Head,
    pub outputs: usize,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.outputs == 0 {
            return Err(Error::Validation("encoder needs layers and outputs".into()));
        }
        if self.layers[0].in_channels != self.input_channels {
            return Err(Error::Validation(format!(
                "first layer expects {} channels, input has {}",
                self.layers[0].in_channels, self.input_channels
            )));
        }
        check_chain(&self.layers)?;
        if self.layers.iter().any(|l| l.upsample) {
            return Err(Error::Validation("encoder layers cannot upsample".into()));
        }
        let downs = self.layers.iter().filter(|l| l.downsample).count();
        if !self.resolution.is_multiple_of(1 << downs) || self.resolution >> downs == 0 {
            return Err(Error::Validation(format!(
                "resolution {} not divisible by 2^{downs}",
                self.resolution
            )));
        }
        Ok(())
    }

    pub fn final_resolution(&self) -> usize {
        self.resolution >> self.layers.iter().filter(|l| l.downsample).count()
    }

    pub fn feature_dim(&self) -> usize {
        let c = self.layers.last().map_or(0, |l| l.out_channels);
        match self.head {
            Head::Gap => c,
            Head::Flatten => c * self.final_resolution().pow(2),
        }
    }

    pub fn toy_discriminator(widths: [usize; 3]) -> Self {
        let lrelu = Activation::DEFAULT_LEAKY;
        Self {
            input_channels: 3,
            resolution: 32,
            layers: vec![
                LayerSpec::new(3, widths[0], 3, lrelu).down(),
                LayerSpec::new(widths[0], widths[1], 3, lrelu).down(),
                LayerSpec::new(widths[1], widths[2], 3, lrelu).down(),
            ],
            head: Head::Flatten,
            outputs: 1,
        }
    }

    pub fn toy_classifier(num_classes: usize) -> Self {
        let lrelu = Activation::DEFAULT_LEAKY;
        Self {
            input_channels: 3,
            resolution: 32,
            layers: vec![
                LayerSpec::new(3, 16, 3, lrelu).down(),
                LayerSpec::new(16, 32, 3, lrelu).down(),
                LayerSpec::new(32, 32, 3, lrelu),
            ],
            head: Head::Gap,
            outputs: num_classes,
        }
    }
}
