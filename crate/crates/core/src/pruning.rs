//! Channel saliency metrics and uniform per-layer channel selection.
//!
//! A "channel" is an output channel of a hidden generator layer `t`. Its outgoing
//! weights are the slice `layers.{t+1}.weight[i]` of the consuming kernel, stored
//! as `(n_in, n_out, k, k)`.

use std::collections::BTreeMap;

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::content::{apply_coi_noise_with, masks_for, MaskProvider, NoiseConfig};
use crate::error::{Error, Result};
use crate::model::generator::layer_name;
use crate::model::{Generator, GeneratorSpec};
use crate::nn::ParamSet;
use crate::tensor::{seeded_rng, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    L1Out,
    L1In,
    LowAct,
    Random,
    CaL1Out,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::L1Out,
        Metric::L1In,
        Metric::LowAct,
        Metric::Random,
        Metric::CaL1Out,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::L1Out => "l1_out",
            Metric::L1In => "l1_in",
            Metric::LowAct => "low_act",
            Metric::Random => "random",
            Metric::CaL1Out => "ca_l1_out",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown pruning metric {s:?}")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub empty_masks: Option<usize>,
}

/// Per-layer, per-channel non-negative scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSaliency {
    pub metric: Metric,
    pub per_layer: BTreeMap<usize, Vec<f64>>,
    pub provenance: Provenance,
}

impl ChannelSaliency {
    pub fn validate(&self, spec: &GeneratorSpec) -> Result<()> {
        for (&t, scores) in &self.per_layer {
            let n = spec.layers.get(t).map(|l| l.out_channels).unwrap_or(0);
            if scores.len() != n {
                return Err(Error::Validation(format!(
                    "layer {t}: {} scores for {n} channels",
                    scores.len()
                )));
            }
            if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
                return Err(Error::Validation(format!(
                    "layer {t}: scores must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }
}

/// Channels removed per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub remove: BTreeMap<usize, Vec<usize>>,
    pub remove_ratio: f64,
    pub source_metric: Metric,
}

impl PruningPlan {
    pub fn removed_count(&self) -> usize {
        self.remove.values().map(Vec::len).sum()
    }
}

fn kernel_dims<T: Real>(kernel: &Tensor<T>) -> Result<()> {
    if kernel.shape().len() != 4 {
        return Err(Error::Shape(format!(
            "kernel must be 4-D (n_in, n_out, h, w), got {:?}",
            kernel.shape()
        )));
    }
    Ok(())
}

/// `score[i] = ‖W_i‖₁` where `W_i` is the `(n_out, h, w)` block leaving input channel `i`.
pub fn l1_out<T: Real>(kernel: &Tensor<T>) -> Result<Vec<f64>> {
    kernel_dims(kernel)?;
    Ok(kernel.abs_sum_along(0))
}

/// `score[j]` = ℓ1 norm of every weight producing output channel `j`.
pub fn l1_in<T: Real>(kernel: &Tensor<T>) -> Result<Vec<f64>> {
    kernel_dims(kernel)?;
    Ok(kernel.abs_sum_along(1))
}

pub fn l1_out_saliency<T: Real>(g: &Generator<T>) -> ChannelSaliency {
    let per_layer = g
        .spec
        .prunable_layers()
        .map(|t| {
            (
                t,
                l1_out(g.params.get(&format!("{}.weight", layer_name(t + 1)))).expect("4-D kernel"),
            )
        })
        .collect();
    ChannelSaliency {
        metric: Metric::L1Out,
        per_layer,
        provenance: Provenance::default(),
    }
}

pub fn l1_in_saliency<T: Real>(g: &Generator<T>) -> ChannelSaliency {
    let per_layer = g
        .spec
        .prunable_layers()
        .map(|t| {
            (
                t,
                l1_in(g.params.get(&format!("{}.weight", layer_name(t)))).expect("4-D kernel"),
            )
        })
        .collect();
    ChannelSaliency {
        metric: Metric::L1In,
        per_layer,
        provenance: Provenance::default(),
    }
}

/// Mean absolute post-activation value of each channel over samples and positions.
pub fn low_act<T: Real>(
    g: &Generator<T>,
    z_samples: &Tensor<T>,
    batch_size: usize,
) -> Result<ChannelSaliency> {
    let n = z_samples.dim(0);
    if n == 0 {
        return Err(Error::Validation(
            "low_act needs at least one latent sample".into(),
        ));
    }
    let layers: Vec<usize> = g.spec.prunable_layers().collect();
    let mut sums: BTreeMap<usize, Vec<f64>> = layers
        .iter()
        .map(|&t| (t, vec![0.0; g.spec.layers[t].out_channels]))
        .collect();
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + batch_size.max(1)).min(n)).collect();
        let fwd = g.forward(&z_samples.gather0(&idx))?;
        for &t in &layers {
            let act = fwd.activation(t);
            let (bn, c, h, w) = act.dims4()?;
            let hw = h * w;
            let acc = sums.get_mut(&t).expect("layer");
            for i in 0..bn {
                let img = act.slice0(i);
                for (ch, a) in acc.iter_mut().enumerate().take(c) {
                    *a += img[ch * hw..(ch + 1) * hw]
                        .iter()
                        .map(|v| v.as_f64().abs())
                        .sum::<f64>()
                        / hw as f64;
                }
            }
        }
        start += idx.len();
    }
    for v in sums.values_mut() {
        v.iter_mut().for_each(|s| *s /= n as f64);
    }
    Ok(ChannelSaliency {
        metric: Metric::LowAct,
        per_layer: sums,
        provenance: Provenance {
            num_samples: Some(n),
            ..Provenance::default()
        },
    })
}

/// i.i.d. uniform `[0, 1)` scores.
pub fn random_saliency(spec: &GeneratorSpec, seed: u64) -> ChannelSaliency {
    let mut rng = seeded_rng(seed);
    let per_layer = spec
        .prunable_layers()
        .map(|t| {
            (
                t,
                (0..spec.layers[t].out_channels)
                    .map(|_| rng.random::<f64>())
                    .collect(),
            )
        })
        .collect();
    ChannelSaliency {
        metric: Metric::Random,
        per_layer,
        provenance: Provenance {
            seed: Some(seed),
            ..Provenance::default()
        },
    }
}

/// Latents and their frozen COI-noisy targets for the content-aware probe loss.
#[derive(Clone, Debug)]
pub struct CaProbe<T> {
    pub z: Tensor<T>,
    pub targets: Tensor<T>,
    pub empty_masks: usize,
}

/// Forward path: generate, parse masks, and add salt-and-pepper noise on COI only.
/// Sample `first_index + i` draws its noise from a stream keyed by that index, so
/// results do not depend on how samples are batched.
pub fn ca_probe<T: Real>(
    g: &Generator<T>,
    z: &Tensor<T>,
    provider: &dyn MaskProvider,
    noise: &NoiseConfig,
    first_index: usize,
) -> Result<CaProbe<T>> {
    noise.validate()?;
    let images = g.generate(z)?;
    let masks = masks_for(provider, &images)?;
    let mut targets = images.clone();
    let mut empty_masks = 0;
    for (i, m) in masks.iter().enumerate() {
        if m.is_empty() {
            empty_masks += 1;
            log::debug!(
                "sample {} has an empty content mask; it contributes no gradient",
                first_index + i
            );
        }
        let mut rng =
            seeded_rng(noise.seed ^ ((first_index + i) as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let noisy = apply_coi_noise_with(&images.index0(i), m, noise.p, &mut rng)?;
        targets.slice0_mut(i).copy_from_slice(noisy.data());
    }
    Ok(CaProbe {
        z: z.clone(),
        targets,
        empty_masks,
    })
}

/// `mean_i mean_pixels |G(z_i) − target_i|` with the targets held constant.
pub fn ca_loss<T: Real>(g: &Generator<T>, probe: &CaProbe<T>) -> Result<f64> {
    let images = g.generate(&probe.z)?;
    Ok(images
        .data()
        .iter()
        .zip(probe.targets.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
        .sum::<f64>()
        / images.len() as f64)
}

/// Gradient of [`ca_loss`] with respect to every generator parameter.
/// Uses `sign(0) = 0`, so pixels where the target equals the output contribute nothing.
pub fn ca_loss_grad<T: Real>(
    g: &Generator<T>,
    probe: &CaProbe<T>,
    scale: f64,
) -> Result<ParamSet<T>> {
    let fwd = g.forward(&probe.z)?;
    let k = T::of(scale / fwd.images.len() as f64);
    let grad = fwd.images.zip_map(&probe.targets, |a, b| {
        if a > b {
            k
        } else if a < b {
            -k
        } else {
            T::zero()
        }
    })?;
    Ok(g.backward(&fwd, &grad, None, false).params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaConfig {
    pub num_samples: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub noise: NoiseConfig,
}

impl Default for CaConfig {
    fn default() -> Self {
        Self {
            num_samples: 256,
            batch_size: 16,
            seed: 0,
            noise: NoiseConfig::default(),
        }
    }
}

/// Content-aware ℓ1-out: ℓ1 norm of each channel's outgoing block of the mean
/// (signed) gradient of the COI-perturbation loss.
pub fn ca_l1_out<T: Real>(
    g: &Generator<T>,
    provider: &dyn MaskProvider,
    cfg: &CaConfig,
) -> Result<ChannelSaliency> {
    if cfg.num_samples == 0 {
        return Err(Error::Validation(
            "ca_l1_out needs at least one sample".into(),
        ));
    }
    cfg.noise.validate()?;
    let z_all = Tensor::<T>::randn(
        &[cfg.num_samples, g.spec.latent_dim],
        1.0,
        &mut seeded_rng(cfg.seed),
    );
    let mut mean_grad: Option<ParamSet<T>> = None;
    let mut empty = 0;
    let mut start = 0;
    while start < cfg.num_samples {
        let idx: Vec<usize> =
            (start..(start + cfg.batch_size.max(1)).min(cfg.num_samples)).collect();
        let z = z_all.gather0(&idx);
        let probe = ca_probe(g, &z, provider, &cfg.noise, start)?;
        empty += probe.empty_masks;
        // per-batch loss is a mean over the batch; reweight to a mean over all samples
        let grad = ca_loss_grad(g, &probe, idx.len() as f64 / cfg.num_samples as f64)?;
        match mean_grad.as_mut() {
            Some(acc) => acc.accumulate(&grad),
            None => mean_grad = Some(grad),
        }
        start += idx.len();
    }
    let mean_grad = mean_grad.expect("at least one batch");
    let per_layer = g
        .spec
        .prunable_layers()
        .map(|t| {
            let key = format!("{}.weight", layer_name(t + 1));
            (t, l1_out(mean_grad.get(&key)).expect("4-D kernel"))
        })
        .collect();
    Ok(ChannelSaliency {
        metric: Metric::CaL1Out,
        per_layer,
        provenance: Provenance {
            num_samples: Some(cfg.num_samples),
            seed: Some(cfg.seed),
            noise: Some(cfg.noise),
            empty_masks: Some(empty),
        },
    })
}

/// Removes the `floor(ratio · n)` lowest-scoring channels of every scored layer;
/// ties go to the lower channel index.
pub fn select_channels(saliency: &ChannelSaliency, remove_ratio: f64) -> Result<PruningPlan> {
    if !(0.0..1.0).contains(&remove_ratio) {
        return Err(Error::Validation(format!(
            "remove ratio {remove_ratio} outside [0, 1)"
        )));
    }
    let mut remove = BTreeMap::new();
    for (&t, scores) in &saliency.per_layer {
        let n = scores.len();
        let k = ((remove_ratio * n as f64) + 1e-9).floor() as usize;
        if k == 0 {
            continue;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        let mut chosen = order[..k].to_vec();
        chosen.sort_unstable();
        remove.insert(t, chosen);
    }
    Ok(PruningPlan {
        remove,
        remove_ratio,
        source_metric: saliency.metric,
    })
}

/// Scores every prunable layer of `g` with `metric`.
pub fn compute_saliency(
    g: &Generator<f32>,
    metric: Metric,
    provider: &dyn MaskProvider,
    ca: &CaConfig,
) -> Result<ChannelSaliency> {
    match metric {
        Metric::L1Out => Ok(l1_out_saliency(g)),
        Metric::L1In => Ok(l1_in_saliency(g)),
        Metric::LowAct => {
            let z = Tensor::randn(
                &[ca.num_samples, g.spec.latent_dim],
                1.0,
                &mut seeded_rng(ca.seed),
            );
            low_act(g, &z, ca.batch_size)
        }
        Metric::Random => Ok(random_saliency(&g.spec, ca.seed)),
        Metric::CaL1Out => ca_l1_out(g, provider, ca),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::content::AllPixels;

    fn saliency(scores: Vec<f64>) -> ChannelSaliency {
        ChannelSaliency {
            metric: Metric::L1Out,
            per_layer: BTreeMap::from([(0, scores)]),
            provenance: Provenance::default(),
        }
    }

    #[test]
    fn l1_out_hand_values() {
        let w = Tensor::<f64>::from_vec(&[2, 1, 1, 1], vec![3.0, -4.0]).unwrap();
        assert_eq!(l1_out(&w).unwrap(), vec![3.0, 4.0]);
        assert_eq!(l1_out(&w.scale(2.0)).unwrap(), vec![6.0, 8.0]);
        let mut z = Tensor::<f64>::randn(&[3, 2, 3, 3], 1.0, &mut seeded_rng(1));
        z.slice0_mut(0).iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(l1_out(&z).unwrap()[0], 0.0);
        assert!(l1_out(&Tensor::<f64>::zeros(&[3, 3])).is_err());
    }

    #[test]
    fn l1_in_hand_values() {
        let mut w = Tensor::<f64>::zeros(&[3, 4, 1, 1]);
        w.data_mut()[4 + 2] = 5.0; // input 1 -> output 2
        assert_eq!(l1_in(&w).unwrap(), vec![0.0, 0.0, 5.0, 0.0]);
    }

    #[test]
    fn select_examples() {
        let plan = select_channels(&saliency(vec![5.0, 1.0, 3.0, 2.0]), 0.5).unwrap();
        assert_eq!(plan.remove[&0], vec![1, 3]);
        assert!(select_channels(&saliency(vec![5.0, 1.0]), 0.0)
            .unwrap()
            .remove
            .is_empty());
        let ties = select_channels(&saliency(vec![1.0; 4]), 0.5).unwrap();
        assert_eq!(ties.remove[&0], vec![0, 1]);
        assert!(select_channels(&saliency(vec![1.0]), 1.0).is_err());
        assert!(select_channels(&saliency(vec![1.0]), -0.1).is_err());
    }

    #[test]
    fn floor_counts() {
        let plan = select_channels(&saliency((0..10).map(f64::from).collect()), 0.3).unwrap();
        assert_eq!(plan.remove[&0], vec![0, 1, 2]);
        let plan = select_channels(&saliency((0..10).map(f64::from).collect()), 0.7).unwrap();
        assert_eq!(plan.remove[&0].len(), 7);
    }

    #[test]
    fn random_is_seeded_and_bounded() {
        let spec = GeneratorSpec::toy(8, [8, 8, 4]);
        let a = random_saliency(&spec, 3);
        assert_eq!(a, random_saliency(&spec, 3));
        assert_ne!(a.per_layer, random_saliency(&spec, 4).per_layer);
        assert!(a
            .per_layer
            .values()
            .flatten()
            .all(|v| (0.0..1.0).contains(v)));
        a.validate(&spec).unwrap();
    }

    #[test]
    fn low_act_constant_and_duplicate_invariance() {
        let mut g = Generator::<f64>::new(GeneratorSpec::toy(4, [4, 4, 2]), 1).unwrap();
        // layer 0 channel 2: zero kernel, zero injection, bias 0.7 -> activation 0.7 everywhere
        let w = g.params.get_mut("layers.0.weight");
        let (cin, cout) = (w.dim(0), w.dim(1));
        for ci in 0..cin {
            for k in 0..9 {
                w.data_mut()[(ci * cout + 2) * 9 + k] = 0.0;
            }
        }
        g.params.get_mut("layers.0.bias").data_mut()[2] = 0.7;
        let inj = g.params.get_mut("layers.0.inject");
        for r in 0..4 {
            inj.data_mut()[r * cout + 2] = 0.0;
        }
        let z = Tensor::<f64>::randn(&[6, 4], 1.0, &mut seeded_rng(2));
        let s = low_act(&g, &z, 4).unwrap();
        assert!((s.per_layer[&0][2] - 0.7).abs() < 1e-12);
        let doubled = Tensor::stack(&[z.clone(), z.clone()])
            .unwrap()
            .reshape(&[12, 4])
            .unwrap();
        let s2 = low_act(&g, &doubled, 5).unwrap();
        for (a, b) in s
            .per_layer
            .values()
            .flatten()
            .zip(s2.per_layer.values().flatten())
        {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(low_act(&g, &Tensor::<f64>::zeros(&[0, 4]), 4).is_err());
    }

    #[test]
    fn ca_dead_channel_scores_zero() {
        // channel 3 of layer 0 never activates, so nothing flows through its outgoing block
        let mut g = Generator::<f64>::new(GeneratorSpec::toy(4, [4, 4, 2]), 1).unwrap();
        let w = g.params.get_mut("layers.0.weight");
        let (cin, cout) = (w.dim(0), w.dim(1));
        for ci in 0..cin {
            w.data_mut()[(ci * cout + 3) * 9..(ci * cout + 4) * 9]
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        g.params.get_mut("layers.0.bias").data_mut()[3] = 0.0;
        let inj = g.params.get_mut("layers.0.inject");
        for r in 0..4 {
            inj.data_mut()[r * cout + 3] = 0.0;
        }
        let cfg = CaConfig {
            num_samples: 8,
            batch_size: 3,
            seed: 1,
            noise: NoiseConfig { p: 0.2, seed: 2 },
        };
        let s = ca_l1_out(&g, &AllPixels, &cfg).unwrap();
        assert_eq!(s.per_layer[&0][3], 0.0);
        assert!(s.per_layer[&0][0] > 0.0);
        s.validate(&g.spec).unwrap();
    }

    #[test]
    fn ca_is_independent_of_batch_size() {
        let g = Generator::<f64>::new(GeneratorSpec::toy(4, [4, 4, 2]), 1).unwrap();
        let mut cfg = CaConfig {
            num_samples: 6,
            batch_size: 6,
            seed: 1,
            noise: NoiseConfig { p: 0.2, seed: 2 },
        };
        let a = ca_l1_out(&g, &AllPixels, &cfg).unwrap();
        cfg.batch_size = 4;
        let b = ca_l1_out(&g, &AllPixels, &cfg).unwrap();
        for (x, y) in a
            .per_layer
            .values()
            .flatten()
            .zip(b.per_layer.values().flatten())
        {
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }
}
