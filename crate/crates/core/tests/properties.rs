use std::collections::BTreeMap;

use gancomp::content::{ContentMask, FixedMask, NoiseConfig};
use gancomp::model::{Generator, GeneratorSpec};
use gancomp::pruning::{
    ca_l1_out, l1_in_saliency, l1_out_saliency, low_act, select_channels, CaConfig,
    ChannelSaliency, Metric, Provenance,
};
use gancomp::tensor::seeded_rng;
use gancomp::Tensor;
use proptest::prelude::*;

fn saliency(per_layer: BTreeMap<usize, Vec<f64>>) -> ChannelSaliency {
    ChannelSaliency {
        metric: Metric::L1Out,
        per_layer,
        provenance: Provenance::default(),
    }
}

fn layers() -> impl Strategy<Value = BTreeMap<usize, Vec<f64>>> {
    prop::collection::btree_map(0usize..4, prop::collection::vec(0.0f64..10.0, 1..24), 1..4)
}

proptest! {
    #[test]
    fn scaling_a_layer_keeps_the_plan(scores in layers(), factor in 0.01f64..100.0, ratio in 0.0f64..0.99) {
        let plan = select_channels(&saliency(scores.clone()), ratio).unwrap();
        let scaled = scores.into_iter().map(|(t, s)| (t, s.into_iter().map(|v| v * factor).collect())).collect();
        prop_assert_eq!(plan.remove, select_channels(&saliency(scaled), ratio).unwrap().remove);
    }

    #[test]
    fn higher_ratio_removes_a_superset(scores in layers(), a in 0.0f64..0.99, b in 0.0f64..0.99) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let s = saliency(scores);
        let small = select_channels(&s, lo).unwrap();
        let large = select_channels(&s, hi).unwrap();
        for (t, chans) in &small.remove {
            let bigger = &large.remove[t];
            prop_assert!(chans.iter().all(|c| bigger.contains(c)));
        }
    }

    #[test]
    fn removal_counts_use_floor(n in 1usize..40, ratio in 0.0f64..0.99) {
        let s = saliency([(0, (0..n).map(|i| i as f64).collect())].into());
        let plan = select_channels(&s, ratio).unwrap();
        let removed = plan.remove.get(&0).map_or(0, Vec::len);
        prop_assert_eq!(removed, (ratio * n as f64 + 1e-9).floor() as usize);
    }
}

/// Reorders axis `axis` of `t` so that new index `j` holds old index `perm[j]`.
fn permute_axis(t: &Tensor<f64>, axis: usize, perm: &[usize]) -> Tensor<f64> {
    let shape = t.shape().to_vec();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mid = shape[axis];
    let mut data = vec![0.0; t.len()];
    for o in 0..outer {
        for (j, &p) in perm.iter().enumerate() {
            let dst = (o * mid + j) * inner;
            let src = (o * mid + p) * inner;
            data[dst..dst + inner].copy_from_slice(&t.data()[src..src + inner]);
        }
    }
    Tensor::from_vec(&shape, data).unwrap()
}

/// Permutes the output channels of hidden layer `t` together with every consumer.
fn permute_channels(g: &Generator<f64>, t: usize, perm: &[usize]) -> Generator<f64> {
    let mut out = g.clone();
    let mut apply = |name: String, axis: usize| {
        let p = permute_axis(g.params.get(&name), axis, perm);
        *out.params.get_mut(&name) = p;
    };
    apply(format!("layers.{t}.weight"), 1);
    apply(format!("layers.{t}.bias"), 0);
    apply(format!("layers.{t}.inject"), 1);
    apply(format!("layers.{}.weight", t + 1), 0);
    if g.spec.tap_layers.contains(&t) {
        apply(format!("taps.{t}.weight"), 0);
    }
    out
}

fn assert_permuted(before: &ChannelSaliency, after: &ChannelSaliency, t: usize, perm: &[usize]) {
    for (&layer, scores) in &before.per_layer {
        for (j, &v) in after.per_layer[&layer].iter().enumerate() {
            let expect = if layer == t {
                scores[perm[j]]
            } else {
                scores[j]
            };
            assert!(
                (v - expect).abs() <= 1e-9 * expect.abs().max(1.0),
                "{:?} layer {layer}[{j}]: {v} vs {expect}",
                before.metric
            );
        }
    }
}

#[test]
fn saliency_is_permutation_equivariant() {
    let g = Generator::<f64>::new(GeneratorSpec::toy(8, [6, 5, 4]), 3).unwrap();
    let mask = FixedMask {
        mask: ContentMask::from_fn(32, 32, |y, x| y > 8 && x < 20),
    };
    let cfg = CaConfig {
        num_samples: 8,
        batch_size: 4,
        seed: 2,
        noise: NoiseConfig { p: 0.1, seed: 2 },
    };
    let z = Tensor::<f64>::randn(&[8, 8], 1.0, &mut seeded_rng(4));
    let perms: [(usize, &[usize]); 2] = [(0, &[3, 0, 5, 1, 4, 2]), (1, &[4, 2, 0, 1, 3])];
    for (t, perm) in perms {
        let h = permute_channels(&g, t, perm);
        assert_eq!(
            g.generate(&z).unwrap().data().len(),
            h.generate(&z).unwrap().data().len()
        );
        assert_permuted(&l1_out_saliency(&g), &l1_out_saliency(&h), t, perm);
        assert_permuted(&l1_in_saliency(&g), &l1_in_saliency(&h), t, perm);
        assert_permuted(
            &low_act(&g, &z, 4).unwrap(),
            &low_act(&h, &z, 4).unwrap(),
            t,
            perm,
        );
        assert_permuted(
            &ca_l1_out(&g, &mask, &cfg).unwrap(),
            &ca_l1_out(&h, &mask, &cfg).unwrap(),
            t,
            perm,
        );
    }
}
