//! Convolution, resampling, dense and activation primitives with hand-written
//! backward passes, plus the named parameter container and Adam.
//!
//! Convolution kernels use the `(n_in, n_out, k, k)` layout so that
//! `kernel[i]` is the block of weights leaving input channel `i`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Tanh,
    Identity,
}

impl Activation {
    pub const DEFAULT_LEAKY: Activation = Activation::LeakyRelu { slope: 0.2 };

    pub fn apply<T: Real>(&self, pre: &Tensor<T>) -> Tensor<T> {
        match *self {
            Activation::LeakyRelu { slope } => {
                let s = T::of(slope);
                pre.map(|v| if v > T::zero() { v } else { v * s })
            }
            Activation::Tanh => pre.map(|v| v.tanh()),
            Activation::Identity => pre.clone(),
        }
    }

    /// Multiplies `grad` in place by the activation derivative.
    pub fn backward_in_place<T: Real>(
        &self,
        pre: &Tensor<T>,
        out: &Tensor<T>,
        grad: &mut Tensor<T>,
    ) {
        match *self {
            Activation::LeakyRelu { slope } => {
                let s = T::of(slope);
                for (g, &p) in grad.data_mut().iter_mut().zip(pre.data()) {
                    if p <= T::zero() {
                        *g *= s;
                    }
                }
            }
            Activation::Tanh => {
                for (g, &o) in grad.data_mut().iter_mut().zip(out.data()) {
                    *g *= T::one() - o * o;
                }
            }
            Activation::Identity => {}
        }
    }
}

/// Buffers kept from a convolution forward pass.
#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    cols: Vec<T>,
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
}

fn pack_kernel<T: Real>(weight: &Tensor<T>) -> (Vec<T>, usize, usize, usize) {
    let (cin, cout, k, _) = weight.dims4().expect("kernel must be 4-D");
    let kk = k * k;
    let r = cin * kk;
    let src = weight.data();
    let mut packed = vec![T::zero(); cout * r];
    for ci in 0..cin {
        for co in 0..cout {
            let s = &src[(ci * cout + co) * kk..(ci * cout + co + 1) * kk];
            packed[co * r + ci * kk..co * r + (ci + 1) * kk].copy_from_slice(s);
        }
    }
    (packed, cin, cout, k)
}

fn unpack_kernel_into<T: Real>(packed: &[T], cin: usize, cout: usize, k: usize, out: &mut [T]) {
    let kk = k * k;
    let r = cin * kk;
    for ci in 0..cin {
        for co in 0..cout {
            out[(ci * cout + co) * kk..(ci * cout + co + 1) * kk]
                .copy_from_slice(&packed[co * r + ci * kk..co * r + (ci + 1) * kk]);
        }
    }
}

fn im2col<T: Real>(img: &[T], cin: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..cin {
        let plane = &img[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let drow = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, d) in drow.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *d = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            srow[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], cin: usize, h: usize, w: usize, k: usize, img: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut img[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            plane[sy as usize * w + sx as usize] += src[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 "same" convolution. `weight` is `(cin, cout, k, k)`, `k` odd.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &[T],
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let (n, cin, h, w) = x.dims4()?;
    let (wcin, cout, k, k2) = weight.dims4()?;
    if wcin != cin || k != k2 || k % 2 == 0 || bias.len() != cout {
        return Err(Error::Shape(format!(
            "conv input {:?} incompatible with kernel {:?} / bias {}",
            x.shape(),
            weight.shape(),
            bias.len()
        )));
    }
    let (packed, _, _, _) = pack_kernel(weight);
    let hw = h * w;
    let r = cin * k * k;
    let mut cols = vec![T::zero(); n * r * hw];
    let mut out = Tensor::zeros(&[n, cout, h, w]);
    for i in 0..n {
        let c = &mut cols[i * r * hw..(i + 1) * r * hw];
        im2col(x.slice0(i), cin, h, w, k, c);
        let o = out.slice0_mut(i);
        matmul(cout, r, hw, &packed, false, c, false, o, T::zero());
        for (co, &b) in bias.iter().enumerate() {
            o[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v += b);
        }
    }
    Ok((
        out,
        ConvCache {
            cols,
            n,
            cin,
            h,
            w,
            k,
        },
    ))
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    cache: &ConvCache<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> ConvGrads<T> {
    let ConvCache {
        ref cols,
        n,
        cin,
        h,
        w,
        k,
    } = *cache;
    let (packed, _, cout, _) = pack_kernel(weight);
    let hw = h * w;
    let r = cin * k * k;
    let mut gpacked = vec![T::zero(); cout * r];
    let mut gbias = vec![T::zero(); cout];
    let mut gin = need_input.then(|| Tensor::zeros(&[n, cin, h, w]));
    let mut gcols = vec![T::zero(); if need_input { r * hw } else { 0 }];
    for i in 0..n {
        let go = grad_out.slice0(i);
        let c = &cols[i * r * hw..(i + 1) * r * hw];
        matmul(cout, hw, r, go, false, c, true, &mut gpacked, T::one());
        for (co, gb) in gbias.iter_mut().enumerate() {
            *gb += go[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
        }
        if let Some(gx) = gin.as_mut() {
            matmul(r, cout, hw, &packed, true, go, false, &mut gcols, T::zero());
            col2im_add(&gcols, cin, h, w, k, gx.slice0_mut(i));
        }
    }
    let mut gweight = Tensor::zeros(weight.shape());
    unpack_kernel_into(&gpacked, cin, cout, k, gweight.data_mut());
    ConvGrads {
        input: gin,
        weight: gweight,
        bias: gbias,
    }
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<T: Real>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4().expect("4-D input");
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                dst[p * oh * ow + y * ow + xx] = src[p * h * w + (y / factor) * w + xx / factor];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward<T: Real>(grad: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (n, c, oh, ow) = grad.dims4().expect("4-D grad");
    let (h, w) = (oh / factor, ow / factor);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let src = grad.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                dst[p * h * w + (y / factor) * w + xx / factor] += src[p * oh * ow + y * ow + xx];
            }
        }
    }
    out
}

/// 2×2 average pooling.
pub fn avg_pool2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4().expect("4-D input");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let quarter = T::of(0.25);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        let s = &src[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let v = s[2 * y * w + 2 * xx]
                    + s[2 * y * w + 2 * xx + 1]
                    + s[(2 * y + 1) * w + 2 * xx]
                    + s[(2 * y + 1) * w + 2 * xx + 1];
                dst[p * oh * ow + y * ow + xx] = v * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Real>(grad: &Tensor<T>) -> Tensor<T> {
    let (n, c, oh, ow) = grad.dims4().expect("4-D grad");
    let (h, w) = (oh * 2, ow * 2);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let quarter = T::of(0.25);
    let src = grad.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        for y in 0..h {
            for xx in 0..w {
                dst[p * h * w + y * w + xx] = src[p * oh * ow + (y / 2) * ow + xx / 2] * quarter;
            }
        }
    }
    out
}

/// `y = x · w + b` with `x: (n, in)`, `w: (in, out)`.
pub fn dense_forward<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    let n = x.dim(0);
    let din = x.len() / n.max(1);
    let (win, dout) = (weight.dim(0), weight.dim(1));
    if win != din || bias.len() != dout {
        return Err(Error::Shape(format!(
            "dense input width {din} vs weight {:?}, bias {}",
            weight.shape(),
            bias.len()
        )));
    }
    let mut out = Tensor::zeros(&[n, dout]);
    matmul(
        n,
        din,
        dout,
        x.data(),
        false,
        weight.data(),
        false,
        out.data_mut(),
        T::zero(),
    );
    for i in 0..n {
        for (o, &b) in out.slice0_mut(i).iter_mut().zip(bias) {
            *o += b;
        }
    }
    Ok(out)
}

/// Returns `(grad_x, grad_w, grad_b)`; `grad_x` is flat `(n, in)`.
pub fn dense_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let n = x.dim(0);
    let din = x.len() / n.max(1);
    let dout = weight.dim(1);
    let mut gw = Tensor::zeros(weight.shape());
    matmul(
        din,
        n,
        dout,
        x.data(),
        true,
        grad_out.data(),
        false,
        gw.data_mut(),
        T::zero(),
    );
    let mut gb = vec![T::zero(); dout];
    for i in 0..n {
        for (g, &v) in gb.iter_mut().zip(grad_out.slice0(i)) {
            *g += v;
        }
    }
    let mut gx = Tensor::zeros(&[n, din]);
    matmul(
        n,
        dout,
        din,
        grad_out.data(),
        false,
        weight.data(),
        true,
        gx.data_mut(),
        T::zero(),
    );
    (gx, gw, gb)
}

/// Named parameter tensors in deterministic (sorted) order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Adds `other` into `self`, entry by entry; missing names are inserted.
    pub fn accumulate(&mut self, other: &Self) {
        for (k, v) in &other.tensors {
            match self.tensors.get_mut(k) {
                Some(t) => t.axpy(T::one(), v),
                None => {
                    self.tensors.insert(k.clone(), v.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data())
            .map(|v| v.as_f64().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T = f32> {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Vec<T>>,
    second: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Applies one update for every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let step_size = T::of(c.lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(c.eps);
        for (name, g) in grads.iter() {
            let Some(p) = params.tensors.get_mut(name) else {
                continue;
            };
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); g.len()]);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                *pv -= step_size * *mv / ((*vv * inv_bc2).sqrt() + eps);
            }
        }
    }
}
