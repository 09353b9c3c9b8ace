//! Adversarial training and knowledge distillation of a (pruned) student generator.
//!
//! The generator objective is
//!
//! ```text
//! L = L_gan + λ · L_norm + γ · L_per
//! ```
//!
//! where `L_norm` is the mean absolute difference between teacher and student outputs
//! (optionally summed over RGB taps as well) and `L_per` is the mean perceptual
//! distance. In content-aware mode both distillation terms see `image ⊙ mask`, with the
//! mask parsed from the teacher's image; the adversarial term always sees the full image.
//!
//! Adversarial losses, with `r` and `f` the discriminator scores on real and fake images:
//!
//! ```text
//! hinge          L_D = mean relu(1 − r) + mean relu(1 + f)     L_G = −mean f
//! nonsaturating  L_D = mean softplus(−r) + mean softplus(f)    L_G = mean softplus(−f)
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::content::{mask_batch, masks_for, ContentMask, MaskProvider};
use crate::error::{Error, Result};
use crate::eval::PerceptualMetric;
use crate::model::{Discriminator, Generator, ModelCheckpoint};
use crate::nn::{Adam, AdamConfig};
use crate::tensor::{seeded_rng, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    OutputOnly,
    Intermediate,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanLoss {
    Hinge,
    Nonsaturating,
}

/// Named combinations of distillation terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    NoKd,
    NormOutput,
    NormIntermediate,
    Perceptual,
    NormOutputPerceptual,
    NormIntermediatePerceptual,
}

impl Regime {
    pub const ALL: [Regime; 6] = [
        Regime::NoKd,
        Regime::NormOutput,
        Regime::NormIntermediate,
        Regime::Perceptual,
        Regime::NormOutputPerceptual,
        Regime::NormIntermediatePerceptual,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::NoKd => "no_kd",
            Regime::NormOutput => "norm_output",
            Regime::NormIntermediate => "norm_intermediate",
            Regime::Perceptual => "perceptual",
            Regime::NormOutputPerceptual => "norm_output_perceptual",
            Regime::NormIntermediatePerceptual => "norm_intermediate_perceptual",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown distillation regime {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub lambda_norm: f64,
    pub gamma_per: f64,
    pub norm_mode: NormMode,
    pub perceptual: bool,
    pub content_aware: bool,
    /// Whether the adversarial term (and discriminator updates) are used at all.
    pub adversarial: bool,
    pub gan_loss: GanLoss,
    pub g_optimizer: AdamConfig,
    pub d_optimizer: AdamConfig,
    pub steps: usize,
    pub batch_size: usize,
    /// Discriminator updates happen on iterations divisible by `d_every`.
    pub d_every: usize,
    /// Discriminator updates per discriminator iteration.
    pub d_steps: usize,
    pub seed: u64,
    /// Intermediate checkpoint interval in steps; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda_norm: 3.0,
            gamma_per: 3.0,
            norm_mode: NormMode::OutputOnly,
            perceptual: true,
            content_aware: false,
            adversarial: true,
            gan_loss: GanLoss::Hinge,
            g_optimizer: AdamConfig::default(),
            d_optimizer: AdamConfig::default(),
            steps: 2000,
            batch_size: 16,
            d_every: 1,
            d_steps: 1,
            seed: 0,
            checkpoint_every: 0,
            log_every: 100,
        }
    }
}

impl DistillConfig {
    /// Plain adversarial training, no teacher.
    pub fn gan_only() -> Self {
        Self::default().with_regime(Regime::NoKd, false)
    }

    /// Sets the distillation terms for `regime`; active terms get weight 3.
    pub fn with_regime(mut self, regime: Regime, content_aware: bool) -> Self {
        let (norm, per) = match regime {
            Regime::NoKd => (NormMode::Off, false),
            Regime::NormOutput => (NormMode::OutputOnly, false),
            Regime::NormIntermediate => (NormMode::Intermediate, false),
            Regime::Perceptual => (NormMode::Off, true),
            Regime::NormOutputPerceptual => (NormMode::OutputOnly, true),
            Regime::NormIntermediatePerceptual => (NormMode::Intermediate, true),
        };
        self.norm_mode = norm;
        self.perceptual = per;
        self.lambda_norm = if norm == NormMode::Off { 0.0 } else { 3.0 };
        self.gamma_per = if per { 3.0 } else { 0.0 };
        self.content_aware = content_aware && regime != Regime::NoKd;
        self
    }

    pub fn norm_active(&self) -> bool {
        self.norm_mode != NormMode::Off && self.lambda_norm > 0.0
    }

    pub fn perceptual_active(&self) -> bool {
        self.perceptual && self.gamma_per > 0.0
    }

    pub fn kd_active(&self) -> bool {
        self.norm_active() || self.perceptual_active()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_norm", self.lambda_norm),
            ("gamma_per", self.gamma_per),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Validation(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !self.adversarial && !self.kd_active() {
            return Err(Error::Validation(
                "no active loss: enable the adversarial term or a distillation term".into(),
            ));
        }
        if self.batch_size == 0 || self.d_every == 0 || self.d_steps == 0 {
            return Err(Error::Validation(
                "batch_size, d_every and d_steps must be positive".into(),
            ));
        }
        for opt in [&self.g_optimizer, &self.d_optimizer] {
            if !(opt.lr > 0.0 && (0.0..1.0).contains(&opt.beta1) && (0.0..1.0).contains(&opt.beta2))
            {
                return Err(Error::Validation(format!(
                    "invalid optimizer settings {opt:?}"
                )));
            }
        }
        Ok(())
    }
}

fn mean_abs_diff<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .sum::<f64>()
        / a.len() as f64)
}

/// `d/ds mean|s − t|` scaled by `weight`, with `sign(0) = 0`.
fn mean_abs_grad<T: Real>(teacher: &Tensor<T>, student: &Tensor<T>, weight: f64) -> Tensor<T> {
    let k = T::of(weight / student.len() as f64);
    student
        .zip_map(teacher, |s, t| {
            if s > t {
                k
            } else if s < t {
                -k
            } else {
                T::zero()
            }
        })
        .expect("same shape")
}

/// Mean absolute difference over batch, channels and pixels.
pub fn kd_norm_output<T: Real>(teacher: &Tensor<T>, student: &Tensor<T>) -> Result<f64> {
    mean_abs_diff(teacher, student)
}

/// Sum over tap layers of the mean absolute tap difference. Include the final
/// output as one of the entries to match the full intermediate objective.
pub fn kd_norm_intermediate<T: Real>(
    teacher_taps: &BTreeMap<usize, Tensor<T>>,
    student_taps: &BTreeMap<usize, Tensor<T>>,
) -> Result<f64> {
    if !teacher_taps.keys().eq(student_taps.keys()) {
        return Err(Error::Validation(format!(
            "teacher taps {:?} and student taps {:?} differ",
            teacher_taps.keys().collect::<Vec<_>>(),
            student_taps.keys().collect::<Vec<_>>()
        )));
    }
    teacher_taps
        .iter()
        .map(|(t, a)| mean_abs_diff(a, &student_taps[t]))
        .sum()
}

/// Mean perceptual distance over the batch.
pub fn kd_perceptual<T: Real>(
    teacher: &Tensor<T>,
    student: &Tensor<T>,
    metric: &PerceptualMetric<T>,
) -> Result<f64> {
    use crate::eval::PerceptualDistance;
    let d = metric.distances(teacher, student)?;
    Ok(d.iter().sum::<f64>() / d.len().max(1) as f64)
}

/// Output-norm and perceptual distillation losses on mask-multiplied images.
pub fn content_aware_kd<T: Real>(
    teacher: &Tensor<T>,
    student: &Tensor<T>,
    masks: &[ContentMask],
    metric: Option<&PerceptualMetric<T>>,
) -> Result<(f64, f64)> {
    let tm = mask_batch(teacher, masks)?;
    let sm = mask_batch(student, masks)?;
    let norm = kd_norm_output(&tm, &sm)?;
    let per = match metric {
        Some(m) => kd_perceptual(&tm, &sm, m)?,
        None => 0.0,
    };
    Ok((norm, per))
}

/// Exactly `l_gan + λ·l_norm + γ·l_per`, dropping inactive terms.
pub fn total_loss(l_gan: f64, l_norm: f64, l_per: f64, cfg: &DistillConfig) -> f64 {
    let mut total = l_gan;
    if cfg.norm_mode != NormMode::Off {
        total += cfg.lambda_norm * l_norm;
    }
    if cfg.perceptual {
        total += cfg.gamma_per * l_per;
    }
    total
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Discriminator loss and its gradients with respect to the real and fake scores.
pub fn discriminator_loss(kind: GanLoss, real: &[f64], fake: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let (nr, nf) = (real.len().max(1) as f64, fake.len().max(1) as f64);
    match kind {
        GanLoss::Hinge => {
            let loss = real.iter().map(|r| (1.0 - r).max(0.0)).sum::<f64>() / nr
                + fake.iter().map(|f| (1.0 + f).max(0.0)).sum::<f64>() / nf;
            let gr = real
                .iter()
                .map(|&r| if r < 1.0 { -1.0 / nr } else { 0.0 })
                .collect();
            let gf = fake
                .iter()
                .map(|&f| if f > -1.0 { 1.0 / nf } else { 0.0 })
                .collect();
            (loss, gr, gf)
        }
        GanLoss::Nonsaturating => {
            let loss = real.iter().map(|&r| softplus(-r)).sum::<f64>() / nr
                + fake.iter().map(|&f| softplus(f)).sum::<f64>() / nf;
            let gr = real.iter().map(|&r| -sigmoid(-r) / nr).collect();
            let gf = fake.iter().map(|&f| sigmoid(f) / nf).collect();
            (loss, gr, gf)
        }
    }
}

/// Generator adversarial loss and its gradient with respect to the fake scores.
pub fn generator_loss(kind: GanLoss, fake: &[f64]) -> (f64, Vec<f64>) {
    let nf = fake.len().max(1) as f64;
    match kind {
        GanLoss::Hinge => (-fake.iter().sum::<f64>() / nf, vec![-1.0 / nf; fake.len()]),
        GanLoss::Nonsaturating => (
            fake.iter().map(|&f| softplus(-f)).sum::<f64>() / nf,
            fake.iter().map(|&f| -sigmoid(-f) / nf).collect(),
        ),
    }
}

/// `(loss_D, loss_G)` from discriminator scores.
pub fn gan_losses_from_scores(kind: GanLoss, real: &[f64], fake: &[f64]) -> (f64, f64) {
    (
        discriminator_loss(kind, real, fake).0,
        generator_loss(kind, fake).0,
    )
}

/// `(loss_D, loss_G)` of `d` on a real and a fake batch.
pub fn gan_losses<T: Real>(
    d: &Discriminator<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    kind: GanLoss,
) -> Result<(f64, f64)> {
    let r: Vec<f64> = d.score(real)?.into_iter().map(Real::as_f64).collect();
    let f: Vec<f64> = d.score(fake)?.into_iter().map(Real::as_f64).collect();
    Ok(gan_losses_from_scores(kind, &r, &f))
}

/// Distillation terms and their gradients for one batch.
#[derive(Clone, Debug)]
pub struct KdTerms<T> {
    pub l_norm: f64,
    pub l_per: f64,
    /// Gradient of `λ·l_norm + γ·l_per` with respect to the student images.
    pub grad_images: Tensor<T>,
    /// Gradient with respect to the student's taps (intermediate mode only).
    pub grad_taps: BTreeMap<usize, Tensor<T>>,
}

/// Computes the configured distillation terms between teacher and student outputs.
///
/// `masks` (content-aware mode) are applied to both images before any term is
/// measured; taps use the mask max-pooled to their resolution.
pub fn kd_terms<T: Real>(
    teacher_images: &Tensor<T>,
    teacher_taps: &BTreeMap<usize, Tensor<T>>,
    student_images: &Tensor<T>,
    student_taps: &BTreeMap<usize, Tensor<T>>,
    masks: Option<&[ContentMask]>,
    cfg: &DistillConfig,
    metric: Option<&PerceptualMetric<T>>,
) -> Result<KdTerms<T>> {
    let masked = |x: &Tensor<T>| -> Result<Tensor<T>> {
        match masks {
            Some(m) => resized_mask_batch(x, m),
            None => Ok(x.clone()),
        }
    };
    let tm = masked(teacher_images)?;
    let sm = masked(student_images)?;
    let mut grad = Tensor::zeros(student_images.shape());
    let mut grad_taps = BTreeMap::new();
    let mut l_norm = 0.0;
    let mut l_per = 0.0;
    if cfg.norm_mode != NormMode::Off {
        l_norm = kd_norm_output(&tm, &sm)?;
        grad.axpy(T::one(), &mean_abs_grad(&tm, &sm, cfg.lambda_norm));
        if cfg.norm_mode == NormMode::Intermediate {
            if !teacher_taps.keys().eq(student_taps.keys()) {
                return Err(Error::Validation(
                    "teacher and student tap layers differ".into(),
                ));
            }
            for (t, ta) in teacher_taps {
                let (ta, sa) = (masked(ta)?, masked(&student_taps[t])?);
                l_norm += kd_norm_output(&ta, &sa)?;
                grad_taps.insert(*t, masked(&mean_abs_grad(&ta, &sa, cfg.lambda_norm))?);
            }
        }
    }
    if cfg.perceptual {
        let metric = metric.ok_or_else(|| {
            Error::Validation("perceptual distillation needs a perceptual metric".into())
        })?;
        let (d, g) = metric.distances_with_grad(&tm, &sm)?;
        let n = d.len().max(1) as f64;
        l_per = d.iter().sum::<f64>() / n;
        grad.axpy(T::of(cfg.gamma_per / n), &g);
    }
    // chain rule through the mask: d(s ⊙ m)/ds = m
    let grad_images = masked(&grad)?;
    Ok(KdTerms {
        l_norm,
        l_per,
        grad_images,
        grad_taps,
    })
}

fn resized_mask_batch<T: Real>(x: &Tensor<T>, masks: &[ContentMask]) -> Result<Tensor<T>> {
    let (_, _, h, _) = x.dims4()?;
    let (mh, _) = masks.first().map_or((h, h), ContentMask::resolution);
    if mh == h || h == 0 {
        return mask_batch(x, masks);
    }
    if mh % h != 0 {
        return Err(Error::Shape(format!(
            "mask resolution {mh} is not a multiple of {h}"
        )));
    }
    let small: Vec<ContentMask> = masks
        .iter()
        .map(|m| m.downsample(mh / h))
        .collect::<Result<_>>()?;
    mask_batch(x, &small)
}

/// One row of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    /// Most recent discriminator loss (0 before the first discriminator update).
    pub l_gan_d: f64,
    pub l_gan_g: f64,
    pub l_norm: f64,
    pub l_per: f64,
    pub total: f64,
}

impl LossRecord {
    fn is_finite(&self) -> bool {
        [
            self.l_gan_d,
            self.l_gan_g,
            self.l_norm,
            self.l_per,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

pub fn history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("step,l_gan_d,l_gan_g,l_norm,l_per,total\n");
    for r in history {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step, r.l_gan_d, r.l_gan_g, r.l_norm, r.l_per, r.total
        )
        .expect("string");
    }
    out
}

/// State captured when training hits a non-finite value.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiagnosticSnapshot {
    pub step: usize,
    pub record: LossRecord,
    pub g_grad_norm: f64,
    pub d_grad_norm: f64,
    pub recent: Vec<LossRecord>,
}

/// Where the loop writes side artifacts; all optional.
#[derive(Clone, Debug, Default)]
pub struct LoopOutputs {
    pub checkpoint_dir: Option<PathBuf>,
    pub diagnostics_path: Option<PathBuf>,
}

/// Mutable training state: student networks, optimizers, RNG and traces.
pub struct TrainState {
    pub step: usize,
    pub student: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub history: Vec<LossRecord>,
    g_opt: Adam<f32>,
    d_opt: Adam<f32>,
    rng: rand_chacha::ChaCha8Rng,
    last_d: f64,
}

pub struct DistillOutcome {
    pub student: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub history: Vec<LossRecord>,
}

/// Everything the loop reads but never modifies.
pub struct DistillInputs<'a> {
    /// `None` trains the student purely adversarially.
    pub teacher: Option<&'a Generator<f32>>,
    /// Real images `(n, c, h, w)` in `[-1, 1]`.
    pub dataset: &'a Tensor<f32>,
    pub mask_provider: Option<&'a dyn MaskProvider>,
    pub perceptual: Option<&'a PerceptualMetric<f32>>,
}

fn scores(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn score_grad(g: &[f64]) -> Tensor<f32> {
    Tensor::from_vec(&[g.len(), 1], g.iter().map(|&v| v as f32).collect()).expect("score gradient")
}

impl TrainState {
    pub fn new(
        student: Generator<f32>,
        discriminator: Discriminator<f32>,
        cfg: &DistillConfig,
    ) -> Self {
        Self {
            step: 0,
            student,
            discriminator,
            history: Vec::new(),
            g_opt: Adam::new(cfg.g_optimizer),
            d_opt: Adam::new(cfg.d_optimizer),
            rng: seeded_rng(cfg.seed),
            last_d: 0.0,
        }
    }

    fn real_batch(&mut self, data: &Tensor<f32>, n: usize) -> Tensor<f32> {
        let count = data.dim(0);
        let idx: Vec<usize> = (0..n).map(|_| self.rng.random_range(0..count)).collect();
        data.gather0(&idx)
    }

    fn latent(&mut self, n: usize) -> Tensor<f32> {
        Tensor::randn(&[n, self.student.latent_dim()], 1.0, &mut self.rng)
    }

    /// One discriminator update; returns the loss and gradient norm.
    fn d_update(&mut self, inputs: &DistillInputs, cfg: &DistillConfig) -> Result<(f64, f64)> {
        let b = cfg.batch_size;
        let z = self.latent(b);
        let fake = self.student.generate(&z)?;
        let real = self.real_batch(inputs.dataset, b);
        let both = Tensor::concat0(&[&real, &fake])?;
        let fwd = self.discriminator.forward(&both)?;
        let s = scores(&fwd.logits);
        let (loss, gr, gf) = discriminator_loss(cfg.gan_loss, &s[..b], &s[b..]);
        let grad = score_grad(&[gr, gf].concat());
        let (grads, _) = self.discriminator.backward(&fwd, Some(&grad), None, false);
        let norm = grads.l2_norm();
        if loss.is_finite() && norm.is_finite() {
            self.d_opt.step(&mut self.discriminator.params, &grads);
        }
        Ok((loss, norm))
    }

    /// Runs one iteration (discriminator updates if due, then one generator update).
    pub fn step(&mut self, inputs: &DistillInputs, cfg: &DistillConfig) -> Result<LossRecord> {
        let mut d_norm = 0.0;
        if cfg.adversarial && self.step.is_multiple_of(cfg.d_every) {
            for _ in 0..cfg.d_steps {
                let (loss, norm) = self.d_update(inputs, cfg)?;
                self.last_d = loss;
                d_norm = norm;
                if !(loss.is_finite() && norm.is_finite()) {
                    let record = LossRecord {
                        step: self.step,
                        l_gan_d: loss,
                        l_gan_g: 0.0,
                        l_norm: 0.0,
                        l_per: 0.0,
                        total: 0.0,
                    };
                    return Err(self.abort(
                        record,
                        0.0,
                        norm,
                        "non-finite discriminator loss or gradient",
                    ));
                }
            }
        }
        let b = cfg.batch_size;
        let z = self.latent(b);
        let fwd = self.student.forward(&z)?;
        let mut grad = Tensor::zeros(fwd.images.shape());
        let mut l_gan_g = 0.0;
        if cfg.adversarial {
            let dfwd = self.discriminator.forward(&fwd.images)?;
            let (loss, gs) = generator_loss(cfg.gan_loss, &scores(&dfwd.logits));
            let (_, gi) = self
                .discriminator
                .backward(&dfwd, Some(&score_grad(&gs)), None, true);
            grad.axpy(1.0, &gi.expect("input gradient"));
            l_gan_g = loss;
        }
        let (mut l_norm, mut l_per) = (0.0, 0.0);
        let mut grad_taps = BTreeMap::new();
        if cfg.kd_active() {
            let teacher = inputs
                .teacher
                .ok_or_else(|| Error::Validation("distillation terms need a teacher".into()))?;
            let tf = teacher.forward(&z)?;
            let masks = match (cfg.content_aware, inputs.mask_provider) {
                (false, _) => None,
                (true, Some(p)) => Some(masks_for(p, &tf.images)?),
                (true, None) => {
                    return Err(Error::Validation(
                        "content-aware distillation needs a mask provider".into(),
                    ))
                }
            };
            let kd = kd_terms(
                &tf.images,
                &tf.taps,
                &fwd.images,
                &fwd.taps,
                masks.as_deref(),
                cfg,
                inputs.perceptual,
            )?;
            grad.axpy(1.0, &kd.grad_images);
            grad_taps = kd.grad_taps;
            l_norm = kd.l_norm;
            l_per = kd.l_per;
        }
        let total = total_loss(l_gan_g, l_norm, l_per, cfg);
        let taps = (!grad_taps.is_empty()).then_some(&grad_taps);
        let grads = self.student.backward(&fwd, &grad, taps, false).params;
        let g_norm = grads.l2_norm();
        let record = LossRecord {
            step: self.step,
            l_gan_d: self.last_d,
            l_gan_g,
            l_norm,
            l_per,
            total,
        };
        if !record.is_finite() || !g_norm.is_finite() {
            return Err(self.abort(
                record,
                g_norm,
                d_norm,
                "non-finite generator loss or gradient",
            ));
        }
        self.g_opt.step(&mut self.student.params, &grads);
        self.history.push(record);
        self.step += 1;
        Ok(record)
    }

    fn abort(&self, record: LossRecord, g_norm: f64, d_norm: f64, msg: &str) -> Error {
        let snap = DiagnosticSnapshot {
            step: self.step,
            record,
            g_grad_norm: g_norm,
            d_grad_norm: d_norm,
            recent: self.history.iter().rev().take(10).rev().copied().collect(),
        };
        let json = serde_json::to_string_pretty(&snap).unwrap_or_default();
        Error::Numerical(format!("step {}: {msg}\n{json}", self.step))
    }
}

fn save_pair(
    dir: &std::path::Path,
    tag: &str,
    state: &TrainState,
    cfg: &DistillConfig,
) -> Result<()> {
    ModelCheckpoint::from_generator(&state.student)
        .with_meta("step", state.step)
        .with_meta("seed", cfg.seed)
        .save(dir.join(format!("{tag}_G.ckpt")))?;
    ModelCheckpoint::from_encoder(&state.discriminator)
        .with_meta("step", state.step)
        .with_meta("seed", cfg.seed)
        .save(dir.join(format!("{tag}_D.ckpt")))
}

/// Fine-tunes `student` (and its discriminator) for `cfg.steps` iterations.
///
/// The teacher is only read. On a non-finite loss the loop stops with
/// [`Error::Numerical`]; the snapshot is also written to `outputs.diagnostics_path`.
pub fn distill_loop(
    student: Generator<f32>,
    discriminator: Discriminator<f32>,
    inputs: &DistillInputs,
    cfg: &DistillConfig,
    outputs: &LoopOutputs,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    if inputs.dataset.dim(0) == 0 && cfg.adversarial && cfg.steps > 0 {
        return Err(Error::Validation(
            "adversarial training needs a non-empty dataset".into(),
        ));
    }
    if cfg.kd_active() && inputs.teacher.is_none() {
        return Err(Error::Validation(
            "distillation terms are active but no teacher was given".into(),
        ));
    }
    if let Some(t) = inputs.teacher {
        if t.latent_dim() != student.latent_dim() || t.spec.tap_layers != student.spec.tap_layers {
            return Err(Error::Validation(
                "teacher and student latent sizes or tap layers differ".into(),
            ));
        }
    }
    let mut state = TrainState::new(student, discriminator, cfg);
    while state.step < cfg.steps {
        if let Err(e) = state.step(inputs, cfg) {
            if let (Error::Numerical(msg), Some(path)) = (&e, &outputs.diagnostics_path) {
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                std::fs::write(path, msg)?;
            }
            return Err(e);
        }
        let r = state.history.last().expect("record");
        if cfg.log_every > 0 && state.step.is_multiple_of(cfg.log_every) {
            log::info!(
                "step {}: d {:.4} g {:.4} norm {:.4} per {:.4} total {:.4}",
                state.step,
                r.l_gan_d,
                r.l_gan_g,
                r.l_norm,
                r.l_per,
                r.total
            );
        }
        if let Some(dir) = &outputs.checkpoint_dir {
            if cfg.checkpoint_every > 0
                && state.step.is_multiple_of(cfg.checkpoint_every)
                && state.step < cfg.steps
            {
                save_pair(dir, &format!("step{:06}", state.step), &state, cfg)?;
            }
        }
    }
    if let Some(dir) = &outputs.checkpoint_dir {
        save_pair(dir, "final", &state, cfg)?;
    }
    Ok(DistillOutcome {
        student: state.student,
        discriminator: state.discriminator,
        history: state.history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::content::{AllPixels, FixedMask};
    use crate::model::{params_hash, ConvEncoder, EncoderSpec, GeneratorSpec};

    fn rand_images(seed: u64, n: usize) -> Tensor<f64> {
        Tensor::randn(&[n, 3, 8, 8], 0.5, &mut seeded_rng(seed))
    }

    fn small_models(seed: u64) -> (Generator<f32>, Discriminator<f32>) {
        let g = Generator::new(GeneratorSpec::toy(8, [8, 8, 4]), seed).unwrap();
        let d = ConvEncoder::new(EncoderSpec::toy_discriminator([4, 8, 8]), seed + 1).unwrap();
        (g, d)
    }

    #[test]
    fn output_norm_examples() {
        let a = rand_images(1, 2);
        let b = rand_images(2, 2);
        assert_eq!(kd_norm_output(&a, &a).unwrap(), 0.0);
        assert!((kd_norm_output(&a, &a.map(|v| v - 0.25)).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(
            kd_norm_output(&a, &b).unwrap(),
            kd_norm_output(&b, &a).unwrap()
        );
    }

    #[test]
    fn intermediate_norm_examples() {
        let taps =
            |seed| BTreeMap::from([(0, rand_images(seed, 2)), (1, rand_images(seed + 1, 2))]);
        let t = taps(3);
        assert_eq!(kd_norm_intermediate(&t, &t).unwrap(), 0.0);
        let mut one = t.clone();
        *one.get_mut(&1).unwrap() = t[&1].map(|v| v + 0.5);
        assert!((kd_norm_intermediate(&t, &one).unwrap() - 0.5).abs() < 1e-12);
        let both: BTreeMap<_, _> = t.iter().map(|(k, v)| (*k, v.map(|x| x - 0.5))).collect();
        assert!((kd_norm_intermediate(&t, &both).unwrap() - 1.0).abs() < 1e-12);
        let mut missing = t.clone();
        missing.remove(&0);
        assert!(kd_norm_intermediate(&t, &missing).is_err());
    }

    #[test]
    fn perceptual_examples() {
        let m = PerceptualMetric::unit(
            ConvEncoder::<f64>::new(EncoderSpec::toy_classifier(3), 2).unwrap(),
        );
        let a = Tensor::<f64>::randn(&[2, 3, 32, 32], 0.5, &mut seeded_rng(1));
        let b = Tensor::<f64>::randn(&[2, 3, 32, 32], 0.5, &mut seeded_rng(2));
        assert_eq!(kd_perceptual(&a, &a, &m).unwrap(), 0.0);
        let ab = kd_perceptual(&a, &b, &m).unwrap();
        assert!(ab > 0.0);
        assert!((ab - kd_perceptual(&b, &a, &m).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn content_aware_examples() {
        let a = rand_images(4, 2);
        let b = rand_images(5, 2);
        let empty = vec![ContentMask::empty(8, 8); 2];
        assert_eq!(content_aware_kd(&a, &b, &empty, None).unwrap(), (0.0, 0.0));
        let full = vec![ContentMask::full(8, 8); 2];
        assert_eq!(
            content_aware_kd(&a, &b, &full, None).unwrap().0,
            kd_norm_output(&a, &b).unwrap()
        );
        let m = ContentMask::from_fn(8, 8, |y, _| y < 4);
        let mut c = a.clone();
        for i in 0..2 {
            for ch in 0..3 {
                for y in 4..8 {
                    for x in 0..8 {
                        c.slice0_mut(i)[(ch * 8 + y) * 8 + x] += 1.0;
                    }
                }
            }
        }
        assert_eq!(
            content_aware_kd(&a, &c, &[m.clone(), m], None).unwrap().0,
            0.0
        );
    }

    #[test]
    fn hinge_and_nonsaturating_examples() {
        assert_eq!(
            gan_losses_from_scores(GanLoss::Hinge, &[1.0, 1.5], &[-1.0, -2.0]).0,
            0.0
        );
        assert_eq!(
            gan_losses_from_scores(GanLoss::Hinge, &[0.0; 4], &[0.0; 4]).0,
            2.0
        );
        for kind in [GanLoss::Hinge, GanLoss::Nonsaturating] {
            let low = generator_loss(kind, &[-0.5, 0.1]).0;
            let high = generator_loss(kind, &[0.5, 1.1]).0;
            assert!(high < low);
        }
        let (l, _, _) = discriminator_loss(GanLoss::Nonsaturating, &[0.0], &[0.0]);
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn score_gradients_match_finite_differences() {
        let real = [0.3, -1.2, 1.7];
        let fake = [-0.4, 0.9, -1.6];
        for kind in [GanLoss::Hinge, GanLoss::Nonsaturating] {
            let (_, gr, gf) = discriminator_loss(kind, &real, &fake);
            let (_, gg) = generator_loss(kind, &fake);
            let h = 1e-6;
            for i in 0..3 {
                let mut rp = real;
                rp[i] += h;
                let mut rm = real;
                rm[i] -= h;
                let fd = (discriminator_loss(kind, &rp, &fake).0
                    - discriminator_loss(kind, &rm, &fake).0)
                    / (2.0 * h);
                assert!((fd - gr[i]).abs() < 1e-6);
                let mut fp = fake;
                fp[i] += h;
                let mut fm = fake;
                fm[i] -= h;
                let fd = (discriminator_loss(kind, &real, &fp).0
                    - discriminator_loss(kind, &real, &fm).0)
                    / (2.0 * h);
                assert!((fd - gf[i]).abs() < 1e-6);
                let fd = (generator_loss(kind, &fp).0 - generator_loss(kind, &fm).0) / (2.0 * h);
                assert!((fd - gg[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn total_loss_examples() {
        let cfg = DistillConfig::default();
        assert_eq!(total_loss(1.0, 2.0, 3.0, &cfg), 16.0);
        let zero = DistillConfig {
            lambda_norm: 0.0,
            gamma_per: 0.0,
            ..cfg.clone()
        };
        assert_eq!(total_loss(1.5, 2.0, 3.0, &zero), 1.5);
        for lambda in [0.5, 1.0, 4.0] {
            let c1 = DistillConfig {
                lambda_norm: lambda,
                ..cfg.clone()
            };
            let c2 = DistillConfig {
                lambda_norm: 2.0 * lambda,
                ..cfg.clone()
            };
            let d = total_loss(1.0, 2.0, 3.0, &c2) - total_loss(1.0, 2.0, 3.0, &c1);
            assert!((d - lambda * 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn regimes_map_to_terms() {
        let c = DistillConfig::default().with_regime(Regime::NoKd, true);
        assert_eq!(
            (c.lambda_norm, c.gamma_per, c.content_aware),
            (0.0, 0.0, false)
        );
        let c = DistillConfig::default().with_regime(Regime::NormOutputPerceptual, true);
        assert!(c.norm_active() && c.perceptual_active() && c.content_aware);
        assert_eq!(
            "norm_intermediate".parse::<Regime>().unwrap(),
            Regime::NormIntermediate
        );
        let off = DistillConfig {
            adversarial: false,
            ..DistillConfig::gan_only()
        };
        assert!(off.validate().is_err());
        assert!(DistillConfig {
            lambda_norm: -1.0,
            ..DistillConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn zero_steps_leave_student_unchanged() {
        let (g, d) = small_models(1);
        let data = Tensor::<f32>::zeros(&[4, 3, 32, 32]);
        let cfg = DistillConfig {
            steps: 0,
            ..DistillConfig::gan_only()
        };
        let inputs = DistillInputs {
            teacher: None,
            dataset: &data,
            mask_provider: None,
            perceptual: None,
        };
        let out =
            distill_loop(g.clone(), d.clone(), &inputs, &cfg, &LoopOutputs::default()).unwrap();
        assert_eq!(out.student, g);
        assert_eq!(out.discriminator, d);
        assert!(out.history.is_empty());
    }

    #[test]
    fn kd_losses_vanish_for_identical_start_and_teacher_is_untouched() {
        let (g, d) = small_models(2);
        let data = Tensor::<f32>::zeros(&[4, 3, 32, 32]);
        let metric =
            PerceptualMetric::unit(ConvEncoder::new(EncoderSpec::toy_classifier(3), 1).unwrap());
        let before = params_hash(&g.params);
        let cfg = DistillConfig {
            steps: 3,
            batch_size: 2,
            adversarial: false,
            content_aware: true,
            ..DistillConfig::default().with_regime(Regime::NormIntermediatePerceptual, true)
        };
        let inputs = DistillInputs {
            teacher: Some(&g),
            dataset: &data,
            mask_provider: Some(&AllPixels),
            perceptual: Some(&metric),
        };
        let out = distill_loop(g.clone(), d, &inputs, &cfg, &LoopOutputs::default()).unwrap();
        assert_eq!(out.history[0].l_norm, 0.0);
        assert_eq!(out.history[0].l_per, 0.0);
        assert_eq!(params_hash(&g.params), before);
    }

    #[test]
    fn runs_are_bit_reproducible() {
        let (g, d) = small_models(3);
        let (teacher, _) = small_models(9);
        let data = Tensor::<f32>::randn(&[8, 3, 32, 32], 0.5, &mut seeded_rng(4));
        let mask = FixedMask {
            mask: ContentMask::from_fn(32, 32, |y, x| y > 8 && x < 20),
        };
        let cfg = DistillConfig {
            steps: 4,
            batch_size: 2,
            content_aware: true,
            perceptual: false,
            gamma_per: 0.0,
            norm_mode: NormMode::Intermediate,
            ..DistillConfig::default()
        };
        let inputs = DistillInputs {
            teacher: Some(&teacher),
            dataset: &data,
            mask_provider: Some(&mask),
            perceptual: None,
        };
        let a = distill_loop(g.clone(), d.clone(), &inputs, &cfg, &LoopOutputs::default()).unwrap();
        let b = distill_loop(g, d, &inputs, &cfg, &LoopOutputs::default()).unwrap();
        assert_eq!(history_csv(&a.history), history_csv(&b.history));
        assert_eq!(a.student, b.student);
        assert!(a.history.iter().all(|r| r.l_norm > 0.0));
    }

    #[test]
    fn nan_aborts_with_snapshot_file() {
        let (mut g, d) = small_models(4);
        g.params.get_mut("layers.0.bias").data_mut()[0] = f32::NAN;
        let data = Tensor::<f32>::zeros(&[4, 3, 32, 32]);
        let dir = tempfile::tempdir().unwrap();
        let outputs = LoopOutputs {
            checkpoint_dir: None,
            diagnostics_path: Some(dir.path().join("diag.json")),
        };
        let cfg = DistillConfig {
            steps: 2,
            batch_size: 2,
            ..DistillConfig::gan_only()
        };
        let inputs = DistillInputs {
            teacher: None,
            dataset: &data,
            mask_provider: None,
            perceptual: None,
        };
        let err = distill_loop(g, d, &inputs, &cfg, &outputs).err().unwrap();
        assert!(matches!(err, Error::Numerical(_)));
        assert!(std::fs::read_to_string(dir.path().join("diag.json"))
            .unwrap()
            .contains("grad_norm"));
    }

    #[test]
    fn checkpoints_are_written_at_intervals() {
        let (g, d) = small_models(5);
        let data = Tensor::<f32>::randn(&[4, 3, 32, 32], 0.5, &mut seeded_rng(1));
        let dir = tempfile::tempdir().unwrap();
        let outputs = LoopOutputs {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            diagnostics_path: None,
        };
        let cfg = DistillConfig {
            steps: 4,
            batch_size: 2,
            checkpoint_every: 2,
            ..DistillConfig::gan_only()
        };
        let inputs = DistillInputs {
            teacher: None,
            dataset: &data,
            mask_provider: None,
            perceptual: None,
        };
        let out = distill_loop(g, d, &inputs, &cfg, &outputs).unwrap();
        assert!(dir.path().join("step000002_G.ckpt").exists());
        let fin = ModelCheckpoint::load(dir.path().join("final_G.ckpt"))
            .unwrap()
            .to_generator()
            .unwrap();
        assert_eq!(fin, out.student);
    }
}
