use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::block::{self, BlockCache};
use crate::model::spec::GeneratorSpec;
use crate::nn::{
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, Activation, ConvCache, ParamSet,
};
use crate::tensor::{seeded_rng, Real, Tensor};

/// Convolutional generator with per-layer latent injection and RGB taps.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T = f32> {
    pub spec: GeneratorSpec,
    pub params: ParamSet<T>,
}

pub(crate) fn layer_name(t: usize) -> String {
    format!("layers.{t}")
}

pub(crate) fn tap_name(t: usize) -> String {
    format!("taps.{t}")
}

/// Everything produced by one forward pass; pass it back to [`Generator::backward`].
#[derive(Clone, Debug)]
pub struct GenForward<T> {
    pub images: Tensor<T>,
    /// Tap projections keyed by layer index, each with `output_channels` channels.
    pub taps: BTreeMap<usize, Tensor<T>>,
    codes: Vec<Tensor<T>>,
    stem_out: Tensor<T>,
    blocks: Vec<BlockCache<T>>,
    tap_caches: BTreeMap<usize, ConvCache<T>>,
}

impl<T: Real> GenForward<T> {
    /// Post-activation output of layer `t`, shape `(n, c_t, h_t, w_t)`.
    pub fn activation(&self, t: usize) -> &Tensor<T> {
        self.blocks[t].activation()
    }
}

#[derive(Clone, Debug)]
pub struct GenGrads<T> {
    pub params: ParamSet<T>,
    /// Gradient for each layer's latent input; present when requested.
    pub codes: Option<Vec<Tensor<T>>>,
}

impl<T: Real> GenGrads<T> {
    /// Latent gradient summed over layers, as for a shared `z`.
    pub fn latent(&self) -> Option<Tensor<T>> {
        let codes = self.codes.as_ref()?;
        let mut total = codes[0].clone();
        for c in &codes[1..] {
            total.axpy(T::one(), c);
        }
        Some(total)
    }
}

impl<T: Real> Generator<T> {
    /// Builds a generator with seeded He-style initialization.
    pub fn new(spec: GeneratorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded_rng(seed);
        let mut params = ParamSet::new();
        let stem_c = spec.layers[0].in_channels;
        let stem_len = stem_c * spec.base_resolution * spec.base_resolution;
        let latent = spec.latent_dim;
        params.insert(
            "stem.weight",
            Tensor::randn(&[latent, stem_len], (1.0 / latent as f64).sqrt(), &mut rng),
        );
        params.insert("stem.bias", Tensor::zeros(&[stem_len]));
        for (t, l) in spec.layers.iter().enumerate() {
            let fan_in = (l.in_channels * l.kernel_size * l.kernel_size) as f64;
            let gain = if matches!(l.activation, Activation::LeakyRelu { .. }) {
                2.0
            } else {
                1.0
            };
            let k = l.kernel_size;
            let name = layer_name(t);
            params.insert(
                format!("{name}.weight"),
                Tensor::randn(
                    &[l.in_channels, l.out_channels, k, k],
                    (gain / fan_in).sqrt(),
                    &mut rng,
                ),
            );
            params.insert(format!("{name}.bias"), Tensor::zeros(&[l.out_channels]));
            params.insert(
                format!("{name}.inject"),
                Tensor::randn(
                    &[latent, l.out_channels],
                    (1.0 / latent as f64).sqrt(),
                    &mut rng,
                ),
            );
        }
        for &t in &spec.tap_layers {
            let c = spec.layers[t].out_channels;
            let name = tap_name(t);
            params.insert(
                format!("{name}.weight"),
                Tensor::randn(
                    &[c, spec.output_channels, 1, 1],
                    (1.0 / c as f64).sqrt(),
                    &mut rng,
                ),
            );
            params.insert(
                format!("{name}.bias"),
                Tensor::zeros(&[spec.output_channels]),
            );
        }
        Ok(Self { spec, params })
    }

    pub fn from_parts(spec: GeneratorSpec, params: ParamSet<T>) -> Result<Self> {
        spec.validate()?;
        let g = Self { spec, params };
        g.check_param_shapes()?;
        Ok(g)
    }

    pub(crate) fn check_param_shapes(&self) -> Result<()> {
        let s = &self.spec;
        let stem_len = s.layers[0].in_channels * s.base_resolution * s.base_resolution;
        let mut want: Vec<(String, Vec<usize>)> = vec![
            ("stem.weight".into(), vec![s.latent_dim, stem_len]),
            ("stem.bias".into(), vec![stem_len]),
        ];
        for (t, l) in s.layers.iter().enumerate() {
            let n = layer_name(t);
            want.push((
                format!("{n}.weight"),
                vec![l.in_channels, l.out_channels, l.kernel_size, l.kernel_size],
            ));
            want.push((format!("{n}.bias"), vec![l.out_channels]));
            want.push((format!("{n}.inject"), vec![s.latent_dim, l.out_channels]));
        }
        for &t in &s.tap_layers {
            let n = tap_name(t);
            want.push((
                format!("{n}.weight"),
                vec![s.layers[t].out_channels, s.output_channels, 1, 1],
            ));
            want.push((format!("{n}.bias"), vec![s.output_channels]));
        }
        if want.len() != self.params.len() {
            return Err(Error::Format(format!(
                "generator expects {} parameters, found {}",
                want.len(),
                self.params.len()
            )));
        }
        for (name, shape) in want {
            match self.params.try_get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Format(format!(
                        "{name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Format(format!("missing parameter {name}"))),
            }
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator {
            spec: self.spec.clone(),
            params: self.params.cast(),
        }
    }

    fn replicate(&self, z: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        if z.shape().len() != 2 || z.dim(1) != self.spec.latent_dim {
            return Err(Error::Shape(format!(
                "latent batch {:?} does not match latent_dim {}",
                z.shape(),
                self.spec.latent_dim
            )));
        }
        Ok(vec![z.clone(); self.spec.layers.len()])
    }

    /// Images for a latent batch `(n, latent_dim)`.
    pub fn generate(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(z)?.images)
    }

    pub fn forward(&self, z: &Tensor<T>) -> Result<GenForward<T>> {
        let codes = self.replicate(z)?;
        self.forward_codes(codes, None)
    }

    /// Forward pass with one latent batch per layer; layer 0's code also feeds the stem.
    /// `zeroed` forces listed channels of listed layers to zero after activation.
    pub fn forward_codes(
        &self,
        codes: Vec<Tensor<T>>,
        zeroed: Option<&BTreeMap<usize, Vec<usize>>>,
    ) -> Result<GenForward<T>> {
        let s = &self.spec;
        if codes.len() != s.layers.len() {
            return Err(Error::Shape(format!(
                "{} layer codes for {} layers",
                codes.len(),
                s.layers.len()
            )));
        }
        let n = codes[0].dim(0);
        for c in &codes {
            if c.shape() != [n, s.latent_dim] {
                return Err(Error::Shape(format!(
                    "layer code {:?}, expected [{n}, {}]",
                    c.shape(),
                    s.latent_dim
                )));
            }
        }
        let stem = dense_forward(
            &codes[0],
            self.params.get("stem.weight"),
            self.params.get("stem.bias").data(),
        )?;
        let stem_out = stem.reshape(&[
            n,
            s.layers[0].in_channels,
            s.base_resolution,
            s.base_resolution,
        ])?;
        let mut x = stem_out.clone();
        let mut blocks = Vec::with_capacity(s.layers.len());
        let mut taps = BTreeMap::new();
        let mut tap_caches = BTreeMap::new();
        for (t, l) in s.layers.iter().enumerate() {
            let name = layer_name(t);
            let inject = self.params.get(&format!("{name}.inject"));
            let cb = dense_forward(&codes[t], inject, &vec![T::zero(); l.out_channels])?;
            let zero = zeroed.and_then(|m| m.get(&t)).map(Vec::as_slice);
            let (out, cache) = block::forward(&self.params, &name, l, &x, Some(&cb), zero)?;
            if s.tap_layers.contains(&t) {
                let tn = tap_name(t);
                let (tap, tc) = conv2d_forward(
                    &out,
                    self.params.get(&format!("{tn}.weight")),
                    self.params.get(&format!("{tn}.bias")).data(),
                )?;
                taps.insert(t, tap);
                tap_caches.insert(t, tc);
            }
            blocks.push(cache);
            x = out;
        }
        Ok(GenForward {
            images: x,
            taps,
            codes,
            stem_out,
            blocks,
            tap_caches,
        })
    }

    /// Backpropagates image (and optional tap) gradients to every parameter and,
    /// if `need_codes`, to each layer's latent input.
    pub fn backward(
        &self,
        fwd: &GenForward<T>,
        grad_images: &Tensor<T>,
        grad_taps: Option<&BTreeMap<usize, Tensor<T>>>,
        need_codes: bool,
    ) -> GenGrads<T> {
        let s = &self.spec;
        let mut grads = ParamSet::new();
        let mut code_grads: Vec<Option<Tensor<T>>> = vec![None; s.layers.len()];
        let mut g = grad_images.clone();
        for t in (0..s.layers.len()).rev() {
            if let Some(gt) = grad_taps.and_then(|m| m.get(&t)) {
                let tn = tap_name(t);
                let tw = self.params.get(&format!("{tn}.weight"));
                let tg = conv2d_backward(&fwd.tap_caches[&t], tw, gt, true);
                g.axpy(T::one(), tg.input.as_ref().expect("input grad"));
                grads.insert(format!("{tn}.weight"), tg.weight);
                grads.insert(
                    format!("{tn}.bias"),
                    Tensor::from_vec(&[tg.bias.len()], tg.bias).expect("bias"),
                );
            }
            let name = layer_name(t);
            let l = &s.layers[t];
            let bg = block::backward(&self.params, &name, l, &fwd.blocks[t], &g, true);
            let (gc, gi, _) = dense_backward(
                &fwd.codes[t],
                self.params.get(&format!("{name}.inject")),
                &bg.channel_bias,
            );
            grads.insert(format!("{name}.inject"), gi);
            grads.insert(format!("{name}.weight"), bg.weight);
            grads.insert(
                format!("{name}.bias"),
                Tensor::from_vec(&[l.out_channels], bg.bias).expect("bias"),
            );
            if need_codes {
                code_grads[t] = Some(gc);
            }
            g = bg.input.expect("input grad");
        }
        for &t in &s.tap_layers {
            if !grad_taps.is_some_and(|m| m.contains_key(&t)) {
                let tn = tap_name(t);
                for p in ["weight", "bias"] {
                    let key = format!("{tn}.{p}");
                    grads.insert(key.clone(), Tensor::zeros(self.params.get(&key).shape()));
                }
            }
        }
        let n = g.dim(0);
        let flat = g.reshape(&[n, fwd.stem_out.len() / n]).expect("stem grad");
        let (gz, gw, gb) = dense_backward(&fwd.codes[0], self.params.get("stem.weight"), &flat);
        grads.insert("stem.weight", gw);
        grads.insert(
            "stem.bias",
            Tensor::from_vec(&[gb.len()], gb).expect("bias"),
        );
        let codes = need_codes.then(|| {
            let mut out: Vec<Tensor<T>> = code_grads
                .into_iter()
                .map(|c| c.expect("code grad"))
                .collect();
            out[0].axpy(T::one(), &gz);
            out
        });
        GenGrads {
            params: grads,
            codes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::spec::LayerSpec;

    fn tiny_spec() -> GeneratorSpec {
        let lrelu = Activation::DEFAULT_LEAKY;
        GeneratorSpec {
            latent_dim: 5,
            base_resolution: 2,
            output_resolution: 8,
            output_channels: 3,
            layers: vec![
                LayerSpec::new(4, 4, 3, lrelu).up(),
                LayerSpec::new(4, 3, 3, lrelu).up(),
                LayerSpec::new(3, 3, 1, Activation::Tanh),
            ],
            tap_layers: [0, 1].into_iter().collect(),
        }
    }

    #[test]
    fn shapes_and_determinism() {
        let spec = GeneratorSpec::toy(16, [8, 8, 4]);
        let g = Generator::<f32>::new(spec.clone(), 3).unwrap();
        let g2 = Generator::<f32>::new(spec, 3).unwrap();
        assert_eq!(g, g2);
        let z = Tensor::randn(&[2, 16], 1.0, &mut seeded_rng(0));
        let out = g.forward(&z).unwrap();
        assert_eq!(out.images.shape(), &[2, 3, 32, 32]);
        assert!(out.images.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        for tap in out.taps.values() {
            assert_eq!(tap.dim(1), 3);
        }
        assert_eq!(g.forward(&z).unwrap().images, out.images);
    }

    #[test]
    fn zero_final_layer_forces_zero_images() {
        let mut g = Generator::<f32>::new(GeneratorSpec::toy(8, [8, 8, 4]), 1).unwrap();
        for p in ["layers.3.weight", "layers.3.bias", "layers.3.inject"] {
            g.params
                .get_mut(p)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let z = Tensor::randn(&[3, 8], 1.0, &mut seeded_rng(1));
        assert!(g.generate(&z).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn latent_width_mismatch_is_shape_error() {
        let g = Generator::<f32>::new(GeneratorSpec::toy(8, [8, 8, 4]), 1).unwrap();
        let z = Tensor::zeros(&[2, 7]);
        assert!(matches!(g.forward(&z), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let g = Generator::<f64>::new(tiny_spec(), 11).unwrap();
        let mut rng = seeded_rng(5);
        let z = Tensor::<f64>::randn(&[2, 5], 1.0, &mut rng);
        let probe = Tensor::<f64>::randn(&[2, 3, 8, 8], 1.0, &mut rng);
        let tap_probe: BTreeMap<usize, Tensor<f64>> = [
            (0, Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng)),
            (1, Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng)),
        ]
        .into_iter()
        .collect();
        let loss = |g: &Generator<f64>, z: &Tensor<f64>| {
            let f = g.forward(z).unwrap();
            let mut l: f64 = f
                .images
                .data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum();
            for (t, p) in &tap_probe {
                l += f.taps[t]
                    .data()
                    .iter()
                    .zip(p.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
            l
        };
        let fwd = g.forward(&z).unwrap();
        let grads = g.backward(&fwd, &probe, Some(&tap_probe), true);
        let h = 1e-6;
        for name in g.params.names().cloned().collect::<Vec<_>>() {
            let len = g.params.get(&name).len();
            for idx in [0, len / 2, len - 1] {
                let mut gp = g.clone();
                gp.params.get_mut(&name).data_mut()[idx] += h;
                let mut gm = g.clone();
                gm.params.get_mut(&name).data_mut()[idx] -= h;
                let fd = (loss(&gp, &z) - loss(&gm, &z)) / (2.0 * h);
                let an = grads.params.get(&name).data()[idx];
                assert!(
                    (fd - an).abs() < 1e-5 * (1.0 + fd.abs()),
                    "{name}[{idx}]: fd {fd} vs {an}"
                );
            }
        }
        let gz = grads.latent().unwrap();
        for idx in [0, 3, 7] {
            let mut zp = z.clone();
            zp.data_mut()[idx] += h;
            let mut zm = z.clone();
            zm.data_mut()[idx] -= h;
            let fd = (loss(&g, &zp) - loss(&g, &zm)) / (2.0 * h);
            assert!((fd - gz.data()[idx]).abs() < 1e-5 * (1.0 + fd.abs()));
        }
    }
}
