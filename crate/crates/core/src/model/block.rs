//! Forward/backward of one [`LayerSpec`] block against a [`ParamSet`].

use crate::error::Result;
use crate::model::spec::LayerSpec;
use crate::nn::{
    avg_pool2, avg_pool2_backward, conv2d_backward, conv2d_forward, upsample_nearest,
    upsample_nearest_backward, ConvCache, ParamSet,
};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub(crate) struct BlockCache<T> {
    conv: ConvCache<T>,
    pre: Tensor<T>,
    /// Post-activation, before any downsample.
    act: Tensor<T>,
}

pub(crate) struct BlockGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
    /// Gradient of the per-sample channel bias `(n, out)`.
    pub channel_bias: Tensor<T>,
}

/// `channel_bias` is an optional `(n, out)` per-sample bias added before the activation.
/// `zero_channels` forces the listed output channels to zero after the activation.
pub(crate) fn forward<T: Real>(
    params: &ParamSet<T>,
    prefix: &str,
    spec: &LayerSpec,
    x: &Tensor<T>,
    channel_bias: Option<&Tensor<T>>,
    zero_channels: Option<&[usize]>,
) -> Result<(Tensor<T>, BlockCache<T>)> {
    let up;
    let input = if spec.upsample {
        up = upsample_nearest(x, 2);
        &up
    } else {
        x
    };
    let weight = params.get(&format!("{prefix}.weight"));
    let bias = params.get(&format!("{prefix}.bias"));
    let (mut pre, conv) = conv2d_forward(input, weight, bias.data())?;
    let (n, c, h, w) = pre.dims4()?;
    if let Some(cb) = channel_bias {
        let hw = h * w;
        for i in 0..n {
            let row = cb.slice0(i).to_vec();
            let img = pre.slice0_mut(i);
            for (ch, &b) in row.iter().enumerate() {
                img[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v += b);
            }
        }
    }
    let mut act = spec.activation.apply(&pre);
    if let Some(zeroed) = zero_channels {
        let hw = h * w;
        for i in 0..n {
            let img = act.slice0_mut(i);
            for &ch in zeroed {
                assert!(ch < c);
                img[ch * hw..(ch + 1) * hw]
                    .iter_mut()
                    .for_each(|v| *v = T::zero());
            }
        }
    }
    let out = if spec.downsample {
        avg_pool2(&act)
    } else {
        act.clone()
    };
    Ok((out, BlockCache { conv, pre, act }))
}

impl<T: Real> BlockCache<T> {
    pub fn activation(&self) -> &Tensor<T> {
        &self.act
    }
}

pub(crate) fn backward<T: Real>(
    params: &ParamSet<T>,
    prefix: &str,
    spec: &LayerSpec,
    cache: &BlockCache<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> BlockGrads<T> {
    let mut g = if spec.downsample {
        avg_pool2_backward(grad_out)
    } else {
        grad_out.clone()
    };
    spec.activation
        .backward_in_place(&cache.pre, &cache.act, &mut g);
    let (n, c, h, w) = g.dims4().expect("4-D");
    let hw = h * w;
    let mut channel_bias = Tensor::zeros(&[n, c]);
    for i in 0..n {
        let img = g.slice0(i);
        let row: Vec<T> = (0..c)
            .map(|ch| img[ch * hw..(ch + 1) * hw].iter().copied().sum())
            .collect();
        channel_bias.slice0_mut(i).copy_from_slice(&row);
    }
    let weight = params.get(&format!("{prefix}.weight"));
    let cg = conv2d_backward(&cache.conv, weight, &g, need_input);
    let input = cg.input.map(|gi| {
        if spec.upsample {
            upsample_nearest_backward(&gi, 2)
        } else {
            gi
        }
    });
    BlockGrads {
        input,
        weight: cg.weight,
        bias: cg.bias,
        channel_bias,
    }
}
