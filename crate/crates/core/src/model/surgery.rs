//! Physically removes generator channels according to a pruning plan.

use crate::error::{Error, Result};
use crate::model::generator::{layer_name, tap_name, Generator};
use crate::pruning::PruningPlan;
use crate::tensor::Real;

/// Rebuilds `g` without the channels listed in `plan`.
///
/// Removing output channel `i` of layer `t` deletes `layers.t.weight[:, i]`, its bias and
/// latent-injection column, the consumer slice `layers.{t+1}.weight[i]` and the tap row
/// `taps.t.weight[i]`. Surviving weights are copied verbatim in their original order.
pub fn remove_channels<T: Real>(g: &Generator<T>, plan: &PruningPlan) -> Result<Generator<T>> {
    let mut spec = g.spec.clone();
    let mut params = g.params.clone();
    let prunable = spec.prunable_layers();
    for (&t, removed) in &plan.remove {
        if !prunable.contains(&t) {
            return Err(Error::Validation(format!("layer {t} is not prunable")));
        }
        let n = spec.layers[t].out_channels;
        if removed.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation(format!(
                "layer {t}: removal indices must be sorted and unique"
            )));
        }
        if let Some(&bad) = removed.iter().find(|&&i| i >= n) {
            return Err(Error::Validation(format!(
                "layer {t}: channel {bad} out of range ({n} channels)"
            )));
        }
        if removed.len() >= n {
            return Err(Error::Validation(format!(
                "layer {t}: plan removes all {n} channels"
            )));
        }
        if removed.is_empty() {
            continue;
        }
        let keep: Vec<usize> = (0..n)
            .filter(|i| removed.binary_search(i).is_err())
            .collect();
        let name = layer_name(t);
        let next = layer_name(t + 1);
        for (key, axis) in [
            (format!("{name}.weight"), 1),
            (format!("{name}.bias"), 0),
            (format!("{name}.inject"), 1),
            (format!("{next}.weight"), 0),
        ] {
            let pruned = params.get(&key).select_axis(axis, &keep);
            *params.get_mut(&key) = pruned;
        }
        if spec.tap_layers.contains(&t) {
            let key = format!("{}.weight", tap_name(t));
            let pruned = params.get(&key).select_axis(0, &keep);
            *params.get_mut(&key) = pruned;
        }
        spec.layers[t].out_channels = keep.len();
        spec.layers[t + 1].in_channels = keep.len();
    }
    Generator::from_parts(spec, params)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::model::spec::GeneratorSpec;
    use crate::pruning::{Metric, PruningPlan};
    use crate::tensor::{seeded_rng, Tensor};

    fn plan(remove: BTreeMap<usize, Vec<usize>>) -> PruningPlan {
        PruningPlan {
            remove,
            remove_ratio: 0.5,
            source_metric: Metric::L1Out,
        }
    }

    #[test]
    fn empty_plan_is_identity() {
        let g = Generator::<f32>::new(GeneratorSpec::toy(8, [8, 8, 4]), 2).unwrap();
        let p = remove_channels(&g, &plan(BTreeMap::new())).unwrap();
        assert_eq!(p, g);
    }

    #[test]
    fn halving_hidden_layers_shrinks_parameters() {
        let g = Generator::<f32>::new(GeneratorSpec::toy(8, [8, 8, 4]), 2).unwrap();
        let remove = [
            (0, vec![0, 2, 4, 6]),
            (1, vec![1, 2, 3, 7]),
            (2, vec![0, 3]),
        ]
        .into_iter()
        .collect();
        let p = remove_channels(&g, &plan(remove)).unwrap();
        assert!(p.param_count() < g.param_count());
        assert_eq!(p.spec.layers[1].in_channels, 4);
        let z = Tensor::randn(&[2, 8], 1.0, &mut seeded_rng(0));
        assert_eq!(p.generate(&z).unwrap().shape(), &[2, 3, 32, 32]);
    }

    #[test]
    fn pruned_model_equals_zeroed_channels() {
        let g = Generator::<f64>::new(GeneratorSpec::toy(8, [8, 8, 4]), 7).unwrap();
        let remove: BTreeMap<usize, Vec<usize>> =
            [(0, vec![1, 5]), (2, vec![3])].into_iter().collect();
        let p = remove_channels(&g, &plan(remove.clone())).unwrap();
        let z = Tensor::<f64>::randn(&[4, 8], 1.0, &mut seeded_rng(9));
        let full = g.forward_codes(vec![z.clone(); 4], Some(&remove)).unwrap();
        let small = p.forward(&z).unwrap();
        for (a, b) in full.images.data().iter().zip(small.images.data()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn invalid_plans_are_rejected() {
        let g = Generator::<f32>::new(GeneratorSpec::toy(8, [4, 4, 4]), 2).unwrap();
        for bad in [
            BTreeMap::from([(0, vec![0, 1, 2, 3])]),
            BTreeMap::from([(1, vec![4])]),
            BTreeMap::from([(3, vec![0])]),
            BTreeMap::from([(0, vec![2, 1])]),
        ] {
            assert!(remove_channels(&g, &plan(bad)).is_err());
        }
    }
}
