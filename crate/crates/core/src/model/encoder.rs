use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::block::{self, BlockCache};
use crate::model::spec::{EncoderSpec, Head};
use crate::nn::{dense_backward, dense_forward, Activation, ParamSet};
use crate::tensor::{seeded_rng, Real, Tensor};

/// Downsampling conv stack with a dense head.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvEncoder<T = f32> {
    pub spec: EncoderSpec,
    pub params: ParamSet<T>,
}

/// Discriminators are single-output encoders with a flatten head.
pub type Discriminator<T = f32> = ConvEncoder<T>;

#[derive(Clone, Debug)]
pub struct EncoderForward<T> {
    /// Output of each block (after any downsample).
    pub features: Vec<Tensor<T>>,
    /// Head input, `(n, feature_dim)`.
    pub pooled: Tensor<T>,
    /// Head output, `(n, outputs)`.
    pub logits: Tensor<T>,
    input_shape: Vec<usize>,
    blocks: Vec<BlockCache<T>>,
}

impl<T: Real> ConvEncoder<T> {
    pub fn new(spec: EncoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded_rng(seed);
        let mut params = ParamSet::new();
        for (t, l) in spec.layers.iter().enumerate() {
            let k = l.kernel_size;
            let fan_in = (l.in_channels * k * k) as f64;
            let gain = if matches!(l.activation, Activation::LeakyRelu { .. }) {
                2.0
            } else {
                1.0
            };
            params.insert(
                format!("layers.{t}.weight"),
                Tensor::randn(
                    &[l.in_channels, l.out_channels, k, k],
                    (gain / fan_in).sqrt(),
                    &mut rng,
                ),
            );
            params.insert(format!("layers.{t}.bias"), Tensor::zeros(&[l.out_channels]));
        }
        let fd = spec.feature_dim();
        params.insert(
            "head.weight",
            Tensor::randn(&[fd, spec.outputs], (1.0 / fd as f64).sqrt(), &mut rng),
        );
        params.insert("head.bias", Tensor::zeros(&[spec.outputs]));
        Ok(Self { spec, params })
    }

    pub fn from_parts(spec: EncoderSpec, params: ParamSet<T>) -> Result<Self> {
        spec.validate()?;
        let mut want: Vec<(String, Vec<usize>)> = Vec::new();
        for (t, l) in spec.layers.iter().enumerate() {
            want.push((
                format!("layers.{t}.weight"),
                vec![l.in_channels, l.out_channels, l.kernel_size, l.kernel_size],
            ));
            want.push((format!("layers.{t}.bias"), vec![l.out_channels]));
        }
        want.push(("head.weight".into(), vec![spec.feature_dim(), spec.outputs]));
        want.push(("head.bias".into(), vec![spec.outputs]));
        if want.len() != params.len() {
            return Err(Error::Format(format!(
                "encoder expects {} parameters, found {}",
                want.len(),
                params.len()
            )));
        }
        for (name, shape) in want {
            match params.try_get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                _ => {
                    return Err(Error::Format(format!(
                        "parameter {name} missing or not {shape:?}"
                    )))
                }
            }
        }
        Ok(Self { spec, params })
    }

    pub fn cast<U: Real>(&self) -> ConvEncoder<U> {
        ConvEncoder {
            spec: self.spec.clone(),
            params: self.params.cast(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<EncoderForward<T>> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.spec.input_channels || h != self.spec.resolution || w != self.spec.resolution {
            return Err(Error::Shape(format!(
                "encoder expects ({}, {r}, {r}) inputs, got {:?}",
                self.spec.input_channels,
                x.shape(),
                r = self.spec.resolution
            )));
        }
        let mut features = Vec::with_capacity(self.spec.layers.len());
        let mut blocks = Vec::with_capacity(self.spec.layers.len());
        let mut cur = x.clone();
        for (t, l) in self.spec.layers.iter().enumerate() {
            let (out, cache) =
                block::forward(&self.params, &format!("layers.{t}"), l, &cur, None, None)?;
            features.push(out.clone());
            blocks.push(cache);
            cur = out;
        }
        let pooled = match self.spec.head {
            Head::Flatten => cur.clone().reshape(&[n, self.spec.feature_dim()])?,
            Head::Gap => {
                let (_, c, h, w) = cur.dims4()?;
                let hw = h * w;
                let inv = T::of(1.0 / hw as f64);
                let mut p = Tensor::zeros(&[n, c]);
                for i in 0..n {
                    let img = cur.slice0(i);
                    let row: Vec<T> = (0..c)
                        .map(|ch| img[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>() * inv)
                        .collect();
                    p.slice0_mut(i).copy_from_slice(&row);
                }
                p
            }
        };
        let logits = dense_forward(
            &pooled,
            self.params.get("head.weight"),
            self.params.get("head.bias").data(),
        )?;
        Ok(EncoderForward {
            features,
            pooled,
            logits,
            input_shape: x.shape().to_vec(),
            blocks,
        })
    }

    /// Scores `(n,)` of a single-output encoder.
    pub fn score(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        Ok(self.forward(x)?.logits.into_data())
    }

    /// Backpropagates gradients on the logits and/or on individual block outputs.
    /// Returns parameter gradients and, if requested, the input gradient.
    pub fn backward(
        &self,
        fwd: &EncoderForward<T>,
        grad_logits: Option<&Tensor<T>>,
        grad_features: Option<&BTreeMap<usize, Tensor<T>>>,
        need_input: bool,
    ) -> (ParamSet<T>, Option<Tensor<T>>) {
        let mut grads = ParamSet::new();
        let n = fwd.input_shape[0];
        let last = self.spec.layers.len() - 1;
        let last_shape = fwd.features[last].shape().to_vec();
        let mut g = grad_logits.map(|gl| {
            let (gp, gw, gb) = dense_backward(&fwd.pooled, self.params.get("head.weight"), gl);
            grads.insert("head.weight", gw);
            grads.insert(
                "head.bias",
                Tensor::from_vec(&[gb.len()], gb).expect("bias"),
            );
            match self.spec.head {
                Head::Flatten => gp.reshape(&last_shape).expect("flatten grad"),
                Head::Gap => {
                    let (_, c, h, w) = fwd.features[last].dims4().expect("4-D");
                    let hw = h * w;
                    let inv = T::of(1.0 / hw as f64);
                    let mut full = Tensor::zeros(&last_shape);
                    for i in 0..n {
                        let row = gp.slice0(i).to_vec();
                        let img = full.slice0_mut(i);
                        for ch in 0..c {
                            img[ch * hw..(ch + 1) * hw]
                                .iter_mut()
                                .for_each(|v| *v = row[ch] * inv);
                        }
                    }
                    full
                }
            }
        });
        let deepest = if grad_logits.is_some() {
            last
        } else {
            grad_features
                .and_then(|m| m.keys().next_back().copied())
                .unwrap_or(0)
        };
        for t in (0..=deepest).rev() {
            let mut gt = g
                .take()
                .unwrap_or_else(|| Tensor::zeros(fwd.features[t].shape()));
            if let Some(gf) = grad_features.and_then(|m| m.get(&t)) {
                gt.axpy(T::one(), gf);
            }
            let name = format!("layers.{t}");
            let bg = block::backward(
                &self.params,
                &name,
                &self.spec.layers[t],
                &fwd.blocks[t],
                &gt,
                t > 0 || need_input,
            );
            grads.insert(format!("{name}.weight"), bg.weight);
            grads.insert(
                format!("{name}.bias"),
                Tensor::from_vec(&[bg.bias.len()], bg.bias).expect("bias"),
            );
            if t == 0 {
                return (grads, bg.input);
            }
            g = bg.input;
        }
        unreachable!("loop returns at layer 0")
    }
}

/// Fresh student discriminator: same architecture, parameters copied from the teacher.
pub fn init_student_discriminator<T: Real>(teacher: &Discriminator<T>) -> Discriminator<T> {
    teacher.clone()
}
