//! Procedural toy dataset: one bright anti-aliased shape per image on a dark,
//! textured background, with the exact rendered foreground recorded per image.

use std::fs;
use std::path::Path;

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::content::ContentMask;
use crate::error::{Error, Result};
use crate::tensor::{seeded_rng, Tensor};

const SUPERSAMPLE: usize = 4;
const IMAGES_FILE: &str = "images.u8";
const MANIFEST_FILE: &str = "dataset.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Disk, ShapeKind::Square, ShapeKind::Triangle];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub count: usize,
    pub resolution: usize,
    pub seed: u64,
    pub classes: Vec<ShapeKind>,
    /// Shape circumradius range as a fraction of the resolution.
    pub min_size: f64,
    pub max_size: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 5000,
            resolution: 32,
            seed: 0,
            classes: ShapeKind::ALL.to_vec(),
            min_size: 0.18,
            max_size: 0.32,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Validation("dataset count must be positive".into()));
        }
        if self.resolution < 8 {
            return Err(Error::Validation(format!(
                "resolution {} is too small",
                self.resolution
            )));
        }
        if self.classes.is_empty() {
            return Err(Error::Validation(
                "at least one shape class is required".into(),
            ));
        }
        if !(0.05 <= self.min_size && self.min_size <= self.max_size && self.max_size <= 0.45) {
            return Err(Error::Validation(format!(
                "size range [{}, {}] outside [0.05, 0.45]",
                self.min_size, self.max_size
            )));
        }
        Ok(())
    }
}

/// Renderer parameters of one image. `region` holds the pixels whose area is at
/// least half covered by the shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeRecord {
    pub kind: ShapeKind,
    pub center: [f64; 2],
    pub size: f64,
    pub rotation: f64,
    pub color: [f64; 3],
    #[serde(with = "hex_mask")]
    pub region: ContentMask,
}

mod hex_mask {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::content::ContentMask;

    #[derive(Serialize, Deserialize)]
    struct Packed {
        height: usize,
        width: usize,
        bits: String,
    }

    pub fn serialize<S: Serializer>(m: &ContentMask, s: S) -> Result<S::Ok, S::Error> {
        let (height, width) = m.resolution();
        let mut bytes = vec![0u8; (height * width).div_ceil(8)];
        for (i, &v) in m.grid().iter().enumerate() {
            bytes[i / 8] |= v << (7 - i % 8);
        }
        Packed {
            height,
            width,
            bits: hex::encode(bytes),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ContentMask, D::Error> {
        let p = Packed::deserialize(d)?;
        let bytes = hex::decode(&p.bits).map_err(serde::de::Error::custom)?;
        let n = p.height * p.width;
        if bytes.len() != n.div_ceil(8) {
            return Err(serde::de::Error::custom(
                "mask bit string has the wrong length",
            ));
        }
        let grid = (0..n).map(|i| (bytes[i / 8] >> (7 - i % 8)) & 1).collect();
        ContentMask::new(p.height, p.width, grid).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub config: DatasetConfig,
    /// `(n, 3, r, r)` in `[-1, 1]`, quantized to 8 bits.
    pub images: Tensor<f32>,
    /// Index into `config.classes`.
    pub labels: Vec<usize>,
    pub geometry: Vec<ShapeRecord>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: DatasetConfig,
    labels: Vec<usize>,
    geometry: Vec<ShapeRecord>,
}

fn quantize(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn dequantize(q: u8) -> f32 {
    q as f32 / 127.5 - 1.0
}

struct Shape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    size: f64,
    cos: f64,
    sin: f64,
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        // rotate into the shape frame
        let u = self.cos * dx + self.sin * dy;
        let v = -self.sin * dx + self.cos * dy;
        match self.kind {
            ShapeKind::Disk => u * u + v * v <= self.size * self.size,
            ShapeKind::Square => {
                let half = self.size * std::f64::consts::FRAC_1_SQRT_2;
                u.abs() <= half && v.abs() <= half
            }
            ShapeKind::Triangle => {
                // equilateral, circumradius `size`, apex along -v
                let r = self.size;
                let s3 = 3f64.sqrt();
                v <= r / 2.0 && s3 * u - v <= r && -s3 * u - v <= r
            }
        }
    }

    fn coverage(&self, px: usize, py: usize) -> f64 {
        let mut hits = 0;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let x = px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                let y = py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                hits += self.contains(x, y) as usize;
            }
        }
        hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
    }
}

fn render_one(cfg: &DatasetConfig, rng: &mut impl rand::Rng) -> (Vec<u8>, usize, ShapeRecord) {
    let r = cfg.resolution;
    let rf = r as f64;
    let label = rng.random_range(0..cfg.classes.len());
    let kind = cfg.classes[label];
    let size = rf * rng.random_range(cfg.min_size..=cfg.max_size);
    let margin = size + 1.0;
    let cx = rng.random_range(margin..=rf - margin);
    let cy = rng.random_range(margin..=rf - margin);
    let rotation = rng.random_range(0.0..std::f64::consts::TAU);
    let mut color: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.2..1.0));
    let mean = color.iter().sum::<f64>() / 3.0;
    if mean < 0.45 {
        color
            .iter_mut()
            .for_each(|c| *c = (*c + 0.45 - mean).min(1.0));
    }
    let shade_dir = rng.random_range(0.0..std::f64::consts::TAU);
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.95..-0.7));
    let stripe_amp = rng.random_range(0.03..0.08);
    let stripe_freq = rng.random_range(1.5..4.0);
    let stripe_dir = rng.random_range(0.0..std::f64::consts::PI);
    let stripe_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let shape = Shape {
        kind,
        cx,
        cy,
        size,
        cos: rotation.cos(),
        sin: rotation.sin(),
    };
    let mut pixels = vec![0u8; 3 * r * r];
    let mut region = vec![0u8; r * r];
    for y in 0..r {
        for x in 0..r {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let stripe = stripe_amp
                * (std::f64::consts::TAU
                    * stripe_freq
                    * (fx * stripe_dir.cos() + fy * stripe_dir.sin())
                    / rf
                    + stripe_phase)
                    .sin();
            let grain: f64 = rng.random_range(-0.03..0.03);
            let cov = shape.coverage(x, y);
            region[y * r + x] = (cov >= 0.5) as u8;
            let shade = 0.1 * ((fx - cx) * shade_dir.cos() + (fy - cy) * shade_dir.sin()) / size;
            for ch in 0..3 {
                let b = bg[ch] + stripe + grain;
                let f = (color[ch] + shade).clamp(-1.0, 1.0);
                pixels[(ch * r + y) * r + x] = quantize(cov * f + (1.0 - cov) * b);
            }
        }
    }
    let record = ShapeRecord {
        kind,
        center: [cx, cy],
        size,
        rotation,
        color,
        region: ContentMask::new(r, r, region).expect("grid size"),
    };
    (pixels, label, record)
}

fn to_tensor(raw: &[u8], n: usize, r: usize) -> Result<Tensor<f32>> {
    Tensor::from_vec(&[n, 3, r, r], raw.iter().map(|&q| dequantize(q)).collect())
}

impl ToyDataset {
    /// Renders `config.count` images; identical configs give identical bytes.
    pub fn render(config: &DatasetConfig) -> Result<Self> {
        config.validate()?;
        let (raw, labels, geometry) = Self::render_raw(config);
        Ok(Self {
            config: config.clone(),
            images: to_tensor(&raw, config.count, config.resolution)?,
            labels,
            geometry,
        })
    }

    fn render_raw(config: &DatasetConfig) -> (Vec<u8>, Vec<usize>, Vec<ShapeRecord>) {
        let mut rng = seeded_rng(config.seed);
        let mut raw = Vec::with_capacity(config.count * 3 * config.resolution * config.resolution);
        let mut labels = Vec::with_capacity(config.count);
        let mut geometry = Vec::with_capacity(config.count);
        for _ in 0..config.count {
            let (px, label, rec) = render_one(config, &mut rng);
            raw.extend_from_slice(&px);
            labels.push(label);
            geometry.push(rec);
        }
        (raw, labels, geometry)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// 8-bit pixel values in `(n, c, h, w)` order.
    pub fn raw_bytes(&self) -> Vec<u8> {
        self.images
            .data()
            .iter()
            .map(|&v| quantize(v as f64))
            .collect()
    }

    /// Writes `images.u8` and `dataset.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(IMAGES_FILE), self.raw_bytes())?;
        let manifest = Manifest {
            config: self.config.clone(),
            labels: self.labels.clone(),
            geometry: self.geometry.clone(),
        };
        fs::write(
            dir.join(MANIFEST_FILE),
            serde_json::to_vec_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
        let raw = fs::read(dir.join(IMAGES_FILE))?;
        let (n, r) = (manifest.labels.len(), manifest.config.resolution);
        if raw.len() != n * 3 * r * r || manifest.geometry.len() != n {
            return Err(Error::Format(format!(
                "dataset in {} is inconsistent",
                dir.display()
            )));
        }
        Ok(Self {
            config: manifest.config,
            images: to_tensor(&raw, n, r)?,
            labels: manifest.labels,
            geometry: manifest.geometry,
        })
    }

    pub fn image(&self, i: usize) -> Tensor<f32> {
        self.images.index0(i)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::content::{mask_image, MaskProvider, OracleMask};

    fn small(seed: u64) -> DatasetConfig {
        DatasetConfig {
            count: 40,
            seed,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = ToyDataset::render(&small(3)).unwrap();
        let b = ToyDataset::render(&small(3)).unwrap();
        assert_eq!(a.raw_bytes(), b.raw_bytes());
        assert_eq!(a.geometry, b.geometry);
        assert_ne!(
            a.raw_bytes(),
            ToyDataset::render(&small(4)).unwrap().raw_bytes()
        );
    }

    #[test]
    fn zero_count_is_rejected() {
        assert!(ToyDataset::render(&DatasetConfig {
            count: 0,
            ..DatasetConfig::default()
        })
        .is_err());
    }

    #[test]
    fn regions_are_non_empty_and_in_bounds() {
        let d = ToyDataset::render(&small(5)).unwrap();
        for g in &d.geometry {
            assert!(g.region.coi_size() > 0);
            assert_eq!(g.region.resolution(), (32, 32));
            assert!(g.center.iter().all(|&c| c > g.size && c < 32.0 - g.size));
        }
        assert!(d.images.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn oracle_matches_geometry_within_one_pixel() {
        let d = ToyDataset::render(&small(6)).unwrap();
        let oracle = OracleMask::default();
        for (i, g) in d.geometry.iter().enumerate() {
            let img = d.image(i);
            let m = oracle.mask(&img).unwrap();
            for y in 0..32 {
                for x in 0..32 {
                    if m.get(y, x) != g.region.get(y, x) {
                        // every disagreement sits on the shape boundary
                        let near = |want: bool| {
                            (y.saturating_sub(1)..=(y + 1).min(31)).any(|yy| {
                                (x.saturating_sub(1)..=(x + 1).min(31))
                                    .any(|xx| g.region.get(yy, xx) == want)
                            })
                        };
                        assert!(near(true) && near(false), "image {i} pixel ({y},{x})");
                    }
                }
            }
            let again = oracle.mask(&mask_image(&img, &m).unwrap()).unwrap();
            assert_eq!(again, m);
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let d = ToyDataset::render(&small(7)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let back = ToyDataset::load(dir.path()).unwrap();
        assert_eq!(back, d);
    }
}
