//! PSNR and a convolution FLOP count.

use crate::error::{Error, Result};
use crate::model::GeneratorSpec;
use crate::tensor::{Real, Tensor};

/// Returned for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// `10 · log10(range² / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>, data_range: f64) -> Result<f64> {
    if a.shape() != b.shape() || a.is_empty() {
        return Err(Error::Shape(format!(
            "PSNR of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP))
}

/// `Σ_t 2 · n_in · n_out · k² · H_t · W_t` over the generator's convolution layers,
/// at each layer's output resolution. The dense stem and the RGB taps are not counted.
pub fn flops_estimate(spec: &GeneratorSpec) -> Result<u64> {
    if spec.layers.is_empty() {
        return Err(Error::Validation("generator spec has no layers".into()));
    }
    Ok((0..spec.layers.len()).map(|t| layer_flops(spec, t)).sum())
}

/// FLOPs of layer `t` alone.
pub fn layer_flops(spec: &GeneratorSpec, t: usize) -> u64 {
    let l = &spec.layers[t];
    let r = spec.layer_resolution(t) as u64;
    2 * (l.in_channels * l.out_channels * l.kernel_size * l.kernel_size) as u64 * r * r
}
