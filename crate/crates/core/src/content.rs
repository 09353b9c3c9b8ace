//! Content-of-interest (COI) masks, COI-restricted noise and spatial masking.

use std::collections::VecDeque;
use std::path::Path;

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ConvEncoder, Head};
use crate::tensor::{seeded_rng, Real, Tensor};

/// Binary `H×W` mask; COI is the set of cells equal to 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContentMask {
    height: usize,
    width: usize,
    grid: Vec<u8>,
}

impl ContentMask {
    pub fn new(height: usize, width: usize, grid: Vec<u8>) -> Result<Self> {
        if grid.len() != height * width {
            return Err(Error::Shape(format!(
                "mask grid of {} cells for {height}x{width}",
                grid.len()
            )));
        }
        if grid.iter().any(|&v| v > 1) {
            return Err(Error::Validation("mask entries must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            grid,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            grid: vec![0; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            grid: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let grid = (0..height * width)
            .map(|i| f(i / width, i % width) as u8)
            .collect();
        Self {
            height,
            width,
            grid,
        }
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn grid(&self) -> &[u8] {
        &self.grid
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.grid[y * self.width + x] == 1
    }

    pub fn coi_size(&self) -> usize {
        self.grid.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.coi_size() == 0
    }

    /// Coarser mask where a cell is COI if any pixel of its `factor × factor` block is.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor)
        {
            return Err(Error::Shape(format!(
                "cannot downsample {}x{} by {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut grid = vec![0u8; h * w];
        for y in 0..self.height {
            for x in 0..self.width {
                grid[(y / factor) * w + x / factor] |= self.grid[y * self.width + x];
            }
        }
        Ok(Self {
            height: h,
            width: w,
            grid,
        })
    }

    /// Nested-array debug form, one inner array per row.
    pub fn to_json(&self) -> serde_json::Value {
        let rows: Vec<Vec<u8>> = self.grid.chunks(self.width).map(<[u8]>::to_vec).collect();
        serde_json::json!(rows)
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let rows: Vec<Vec<u8>> = serde_json::from_value(value.clone())?;
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Format("ragged mask rows".into()));
        }
        Self::new(height, width, rows.concat())
    }

    /// Writes a 1-bit grayscale PNG (white = COI).
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut enc = png::Encoder::new(
            std::io::BufWriter::new(file),
            self.width as u32,
            self.height as u32,
        );
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Format(e.to_string()))?;
        let stride = self.width.div_ceil(8);
        let mut packed = vec![0u8; stride * self.height];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    packed[y * stride + x / 8] |= 0x80 >> (x % 8);
                }
            }
        }
        writer
            .write_image_data(&packed)
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    }

    /// Reads a grayscale PNG; any non-zero sample is COI.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut dec = png::Decoder::new(std::io::BufReader::new(file));
        dec.set_transformations(png::Transformations::EXPAND);
        let mut reader = dec.read_info().map_err(|e| Error::Format(e.to_string()))?;
        let mut buf = vec![
            0;
            reader
                .output_buffer_size()
                .ok_or_else(|| Error::Format("png too large".into()))?
        ];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Format(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let samples = info.color_type.samples();
        let grid = (0..w * h).map(|i| (buf[i * samples] != 0) as u8).collect();
        Self::new(h, w, grid)
    }
}

/// Salt-and-pepper noise restricted to COI pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Probability of each of the two replacement values per pixel.
    pub p: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { p: 0.1, seed: 0 }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p < 1.0) || 2.0 * self.p > 1.0 {
            return Err(Error::Validation(format!(
                "noise probability {} must lie in (0, 0.5]",
                self.p
            )));
        }
        Ok(())
    }
}

fn check_mask_fits(c_h_w: (usize, usize), mask: &ContentMask) -> Result<()> {
    if mask.resolution() != c_h_w {
        return Err(Error::Shape(format!(
            "mask {:?} does not match image {:?}",
            mask.resolution(),
            c_h_w
        )));
    }
    Ok(())
}

/// Replaces each COI pixel (all channels) by −1 with probability `p`, by +1 with
/// probability `p`; other pixels are copied untouched.
pub fn apply_coi_noise_with<T: Real>(
    image: &Tensor<T>,
    mask: &ContentMask,
    p: f64,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    let [c, h, w] = image.shape()[..] else {
        return Err(Error::Shape(format!(
            "expected (c, h, w) image, got {:?}",
            image.shape()
        )));
    };
    check_mask_fits((h, w), mask)?;
    let mut out = image.clone();
    let data = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let u: f64 = rng.random();
            let value = if u < p {
                -T::one()
            } else if u < 2.0 * p {
                T::one()
            } else {
                continue;
            };
            for ch in 0..c {
                data[(ch * h + y) * w + x] = value;
            }
        }
    }
    Ok(out)
}

pub fn apply_coi_noise<T: Real>(
    image: &Tensor<T>,
    mask: &ContentMask,
    cfg: &NoiseConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    apply_coi_noise_with(image, mask, cfg.p, &mut seeded_rng(cfg.seed))
}

/// `image ⊙ mask` for a `(c, h, w)` image.
pub fn mask_image<T: Real>(image: &Tensor<T>, mask: &ContentMask) -> Result<Tensor<T>> {
    let [c, h, w] = image.shape()[..] else {
        return Err(Error::Shape(format!(
            "expected (c, h, w) image, got {:?}",
            image.shape()
        )));
    };
    check_mask_fits((h, w), mask)?;
    let mut out = image.clone();
    let data = out.data_mut();
    for ch in 0..c {
        for (i, &m) in mask.grid().iter().enumerate() {
            if m == 0 {
                data[ch * h * w + i] = T::zero();
            }
        }
    }
    Ok(out)
}

/// Applies one mask per image of an `(n, c, h, w)` batch.
pub fn mask_batch<T: Real>(images: &Tensor<T>, masks: &[ContentMask]) -> Result<Tensor<T>> {
    let (n, ..) = images.dims4()?;
    if masks.len() != n {
        return Err(Error::Shape(format!(
            "{} masks for {n} images",
            masks.len()
        )));
    }
    let mut out = images.clone();
    for (i, m) in masks.iter().enumerate() {
        let masked = mask_image(&images.index0(i), m)?;
        out.slice0_mut(i).copy_from_slice(masked.data());
    }
    Ok(out)
}

/// Something that parses an image into a content mask.
pub trait MaskProvider: Send + Sync {
    fn name(&self) -> &str;

    /// Mask for one `(c, h, w)` image.
    fn mask(&self, image: &Tensor<f32>) -> Result<ContentMask>;

    fn masks<T: Real>(&self, images: &Tensor<T>) -> Result<Vec<ContentMask>>
    where
        Self: Sized,
    {
        let (n, ..) = images.dims4()?;
        (0..n)
            .map(|i| self.mask(&images.index0(i).cast()))
            .collect()
    }
}

/// Masks for every image of a batch through a trait object.
pub fn masks_for<T: Real>(
    provider: &dyn MaskProvider,
    images: &Tensor<T>,
) -> Result<Vec<ContentMask>> {
    let (n, ..) = images.dims4()?;
    (0..n)
        .map(|i| provider.mask(&images.index0(i).cast()))
        .collect()
}

/// Mean-luminance threshold followed by the largest 4-connected component.
/// Matches the toy renderer: bright shapes over a dark background.
#[derive(Clone, Debug)]
pub struct OracleMask {
    pub threshold: f32,
}

impl Default for OracleMask {
    fn default() -> Self {
        Self { threshold: 0.1 }
    }
}

impl MaskProvider for OracleMask {
    fn name(&self) -> &str {
        "oracle"
    }

    fn mask(&self, image: &Tensor<f32>) -> Result<ContentMask> {
        let [c, h, w] = image.shape()[..] else {
            return Err(Error::Shape(format!(
                "expected (c, h, w) image, got {:?}",
                image.shape()
            )));
        };
        let data = image.data();
        let bright: Vec<bool> = (0..h * w)
            .map(|i| (0..c).map(|ch| data[ch * h * w + i]).sum::<f32>() / c as f32 > self.threshold)
            .collect();
        Ok(largest_component(&bright, h, w))
    }
}

fn largest_component(on: &[bool], h: usize, w: usize) -> ContentMask {
    let mut label = vec![usize::MAX; h * w];
    let mut best: Vec<usize> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !on[start] || label[start] != usize::MAX {
            continue;
        }
        let mut comp = Vec::new();
        label[start] = start;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if on[j] && label[j] == usize::MAX {
                    label[j] = start;
                    queue.push_back(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    let mut grid = vec![0u8; h * w];
    for i in best {
        grid[i] = 1;
    }
    ContentMask {
        height: h,
        width: w,
        grid,
    }
}

/// Class activation mapping over a GAP-head classifier.
#[derive(Clone, Debug)]
pub struct CamMask {
    classifier: ConvEncoder<f32>,
    pub threshold_fraction: f32,
}

impl CamMask {
    pub fn new(classifier: ConvEncoder<f32>, threshold_fraction: f32) -> Result<Self> {
        if classifier.spec.head != Head::Gap {
            return Err(Error::Unsupported(
                "class activation maps need a global-average-pool head".into(),
            ));
        }
        Ok(Self {
            classifier,
            threshold_fraction,
        })
    }

    /// Min-max normalized activation map at feature resolution, or `None` when constant.
    pub fn activation_map(&self, image: &Tensor<f32>) -> Result<Option<Tensor<f32>>> {
        let batch = Tensor::stack(std::slice::from_ref(image))?;
        let fwd = self.classifier.forward(&batch)?;
        let logits = fwd.logits.data();
        let class = (0..logits.len()).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
        let maps = fwd.features.last().expect("layers");
        let (_, k, fh, fw) = maps.dims4()?;
        let head = self.classifier.params.get("head.weight");
        let outputs = self.classifier.spec.outputs;
        let mut cam = vec![0.0f32; fh * fw];
        for ch in 0..k {
            let wk = head.data()[ch * outputs + class];
            for (c, &f) in cam
                .iter_mut()
                .zip(&maps.data()[ch * fh * fw..(ch + 1) * fh * fw])
            {
                *c += wk * f;
            }
        }
        let lo = cam.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = cam.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let range = hi - lo;
        if range.is_nan() || range <= 1e-12 {
            return Ok(None);
        }
        let norm = cam.iter().map(|v| (v - lo) / range).collect();
        Ok(Some(Tensor::from_vec(&[fh, fw], norm)?))
    }
}

impl MaskProvider for CamMask {
    fn name(&self) -> &str {
        "cam"
    }

    fn mask(&self, image: &Tensor<f32>) -> Result<ContentMask> {
        let [_, h, w] = image.shape()[..] else {
            return Err(Error::Shape(format!(
                "expected (c, h, w) image, got {:?}",
                image.shape()
            )));
        };
        let Some(map) = self.activation_map(image)? else {
            log::debug!("constant class activation map; using an all-ones mask");
            return Ok(ContentMask::full(h, w));
        };
        let (fh, fw) = (map.dim(0), map.dim(1));
        if h % fh != 0 || w % fw != 0 {
            return Err(Error::Shape(format!(
                "feature map {fh}x{fw} does not tile image {h}x{w}"
            )));
        }
        let (sy, sx) = (h / fh, w / fw);
        Ok(ContentMask::from_fn(h, w, |y, x| {
            map.data()[(y / sy) * fw + x / sx] >= self.threshold_fraction
        }))
    }
}

/// The same stored mask for every image (`--mask-provider file`).
#[derive(Clone, Debug)]
pub struct FixedMask {
    pub mask: ContentMask,
}

impl FixedMask {
    /// Loads a PNG, or the JSON nested-array form when the extension is `.json`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mask = if path.extension().is_some_and(|e| e == "json") {
            ContentMask::from_json(&serde_json::from_slice(&std::fs::read(path)?)?)?
        } else {
            ContentMask::load_png(path)?
        };
        Ok(Self { mask })
    }
}

impl MaskProvider for FixedMask {
    fn name(&self) -> &str {
        "file"
    }

    fn mask(&self, image: &Tensor<f32>) -> Result<ContentMask> {
        let [_, h, w] = image.shape()[..] else {
            return Err(Error::Shape(format!(
                "expected (c, h, w) image, got {:?}",
                image.shape()
            )));
        };
        check_mask_fits((h, w), &self.mask)?;
        Ok(self.mask.clone())
    }
}

/// Every pixel is content; makes content-aware code paths content-agnostic.
#[derive(Clone, Debug, Default)]
pub struct AllPixels;

impl MaskProvider for AllPixels {
    fn name(&self) -> &str {
        "all"
    }

    fn mask(&self, image: &Tensor<f32>) -> Result<ContentMask> {
        let [_, h, w] = image.shape()[..] else {
            return Err(Error::Shape(format!(
                "expected (c, h, w) image, got {:?}",
                image.shape()
            )));
        };
        Ok(ContentMask::full(h, w))
    }
}
