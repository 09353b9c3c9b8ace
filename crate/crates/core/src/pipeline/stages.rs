//! The pipeline stages. Each stage reads artifacts of earlier stages from the
//! run directory, writes its own, and records them in the manifest.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::content::MaskProvider;
use crate::dataset::{DatasetConfig, ToyDataset};
use crate::distill::{
    distill_loop, history_csv, DistillConfig, DistillInputs, LoopOutputs, LossRecord, NormMode,
    Regime,
};
use crate::editing::{morph, pca_directions, render_codes, style_mix, traverse, LayeredCode};
use crate::error::{Error, Result};
use crate::eval::extractor::{train_extractor, ExtractorTraining, FeatureExtractor};
use crate::eval::projection::project_image;
use crate::eval::quality::flops_estimate;
use crate::eval::report::{evaluate, sample_fid, EvalReport};
use crate::imageio::{load_image, save_grid};
use crate::model::{init_student_discriminator, remove_channels, Generator, ModelCheckpoint};
use crate::pipeline::config::RunConfig;
use crate::pipeline::experiments::train_teacher;
use crate::pipeline::plots::{line_chart, Series};
use crate::pipeline::run::{stage_input_hash, write_json, Manifest, RunDir, CONFIG_FILE};
use crate::pruning::{compute_saliency, select_channels, Metric};
use crate::tensor::{seeded_rng, Tensor};

const SAMPLE_GRID: usize = 64;
const HELD_OUT_SEED_OFFSET: u64 = 0x005E_ED0F_7E57;

/// Seed of the latents behind each logged sample grid.
pub fn sample_grid_seed(seed: u64) -> u64 {
    seed ^ 0xA11CE
}

pub fn sample_grid_latents(g: &Generator<f32>, seed: u64) -> Tensor<f32> {
    Tensor::randn(
        &[SAMPLE_GRID, g.latent_dim()],
        1.0,
        &mut seeded_rng(sample_grid_seed(seed)),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

/// A generator checkpoint named on the command line.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelRef {
    Teacher,
    Pruned,
    Student,
    Path(PathBuf),
}

impl FromStr for ModelRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "teacher" => ModelRef::Teacher,
            "pruned" => ModelRef::Pruned,
            "student" => ModelRef::Student,
            other => ModelRef::Path(PathBuf::from(other)),
        })
    }
}

impl ModelRef {
    pub fn label(&self) -> String {
        match self {
            ModelRef::Teacher => "teacher".into(),
            ModelRef::Pruned => "pruned".into(),
            ModelRef::Student => "student".into(),
            ModelRef::Path(p) => p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "model".into()),
        }
    }

    pub fn path(&self, run: &RunDir) -> PathBuf {
        match self {
            ModelRef::Teacher => run.checkpoint("teacher_G.ckpt"),
            ModelRef::Pruned => run.checkpoint("pruned_G.ckpt"),
            ModelRef::Student => run.checkpoint("student_G.ckpt"),
            ModelRef::Path(p) => p.clone(),
        }
    }
}

/// Images for `project` and `edit`: explicit PNG files or held-out renders.
#[derive(Clone, Debug, PartialEq)]
pub enum ImageSource {
    Files(Vec<PathBuf>),
    HeldOut(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherSummary {
    pub steps: usize,
    pub final_losses: Option<LossRecord>,
    pub fid_initial: f64,
    pub fid_final: f64,
    pub fid_samples: usize,
    pub sample_grid_seed: u64,
    pub params_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSummary {
    pub metric: Metric,
    pub ratio: f64,
    pub removed_channels: usize,
    pub teacher_flops: u64,
    pub pruned_flops: u64,
    pub teacher_params: usize,
    pub pruned_params: usize,
    /// Whether the plan equals the plain l1_out plan at the same ratio.
    pub same_as_l1_out: bool,
    pub note: String,
    pub pruned_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillSummary {
    pub regime: Option<Regime>,
    pub loss_terms: Vec<String>,
    pub content_aware: bool,
    pub lambda_norm: f64,
    pub gamma_per: f64,
    pub steps: usize,
    pub final_losses: Option<LossRecord>,
    pub student_flops: u64,
    pub student_params: usize,
    pub student_hash: String,
}

/// Names of the active loss terms, adversarial first.
pub fn loss_terms(cfg: &DistillConfig) -> Vec<String> {
    let mut terms = Vec::new();
    if cfg.adversarial {
        terms.push("adversarial".to_string());
    }
    if cfg.norm_active() {
        terms.push(match cfg.norm_mode {
            NormMode::Intermediate => "norm_intermediate".to_string(),
            _ => "norm_output".to_string(),
        });
    }
    if cfg.perceptual_active() {
        terms.push("perceptual".to_string());
    }
    terms
}

/// The named regime matching `cfg`'s loss weights, if any.
pub fn regime_of(cfg: &DistillConfig) -> Option<Regime> {
    Regime::ALL.into_iter().find(|r| {
        let probe = cfg.clone().with_regime(*r, cfg.content_aware);
        loss_terms(&probe) == loss_terms(cfg)
    })
}

fn held_out_config(cfg: &RunConfig, count: usize) -> DatasetConfig {
    DatasetConfig {
        count: count.max(1),
        seed: cfg.dataset.seed.wrapping_add(HELD_OUT_SEED_OFFSET),
        ..cfg.dataset.clone()
    }
}

fn save_loss_plot(path: &Path, title: &str, history: &[LossRecord]) -> Result<()> {
    let series = |name: &str, f: fn(&LossRecord) -> f64| Series {
        name: name.into(),
        points: history.iter().map(|r| (r.step as f64, f(r))).collect(),
    };
    let svg = line_chart(
        title,
        "step",
        "loss",
        &[
            series("D", |r| r.l_gan_d),
            series("G adversarial", |r| r.l_gan_g),
            series("KD norm", |r| r.l_norm),
            series("KD perceptual", |r| r.l_per),
        ],
    );
    std::fs::write(path, svg)?;
    Ok(())
}

pub struct Pipeline {
    pub config: RunConfig,
    pub run: RunDir,
    manifest: Manifest,
    resume: bool,
    extractor: FeatureExtractor,
}

impl Pipeline {
    /// Validates `config`, creates the run directory and dumps the effective config.
    pub fn open(config: RunConfig, resume: bool) -> Result<Self> {
        let config = config.resolved();
        config.validate()?;
        let run = RunDir::create(config.run_dir())?;
        std::fs::write(run.root().join(CONFIG_FILE), config.to_toml()?)?;
        let manifest = Manifest::load(&run)?;
        let extractor = config.load_extractor()?;
        Ok(Self {
            config,
            run,
            manifest,
            resume,
            extractor,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    fn extractor_inputs(&self) -> Vec<&Path> {
        self.config.extractor.iter().map(PathBuf::as_path).collect()
    }

    fn stage(
        &mut self,
        name: &str,
        input_hash: String,
        body: impl FnOnce(&Self) -> Result<Vec<PathBuf>>,
    ) -> Result<StageStatus> {
        if self.resume && self.manifest.is_complete(&self.run, name, &input_hash) {
            info!("{name}: up to date, skipping");
            return Ok(StageStatus::Skipped);
        }
        info!("{name}: running");
        let outputs = body(self)?;
        self.manifest
            .record(&self.run, name, input_hash, &outputs)?;
        self.manifest.save(&self.run)?;
        Ok(StageStatus::Ran)
    }

    fn dataset_files(&self) -> [PathBuf; 2] {
        let dir = self.run.dataset_dir();
        [dir.join("images.u8"), dir.join("dataset.json")]
    }

    fn require(&self, path: &Path, stage: &str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "{} is missing; run `{stage}` first",
                path.display()
            )))
        }
    }

    pub fn load_dataset(&self) -> Result<ToyDataset> {
        self.require(&self.dataset_files()[0], "make-dataset")?;
        ToyDataset::load(self.run.dataset_dir())
    }

    pub fn load_generator(&self, model: &ModelRef) -> Result<Generator<f32>> {
        let path = model.path(&self.run);
        self.require(&path, "the stage producing it")?;
        ModelCheckpoint::load(path)?.to_generator()
    }

    fn mask_provider(&self) -> Result<Box<dyn MaskProvider>> {
        self.config.masks.provider(&self.extractor)
    }

    pub fn make_dataset(&mut self) -> Result<StageStatus> {
        let hash = stage_input_hash("make-dataset", &self.config.dataset, &[])?;
        self.stage("make-dataset", hash, |p| {
            let data = ToyDataset::render(&p.config.dataset)?;
            data.save(p.run.dataset_dir())?;
            let preview = p.run.plots("dataset.png");
            let n = data.len().min(SAMPLE_GRID);
            save_grid(
                &data.images.gather0(&(0..n).collect::<Vec<_>>()),
                8,
                2,
                &preview,
            )?;
            let mut outputs = p.dataset_files().to_vec();
            outputs.push(preview);
            Ok(outputs)
        })
    }

    pub fn train_teacher(&mut self) -> Result<StageStatus> {
        let files = self.dataset_files();
        self.require(&files[0], "make-dataset")?;
        let key = (
            &self.config.model,
            &self.config.teacher,
            self.config.seed,
            self.config.eval.num_samples,
        );
        let mut inputs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
        inputs.extend(self.extractor_inputs());
        let hash = stage_input_hash("train-teacher", &key, &inputs)?;
        self.stage("train-teacher", hash, |p| {
            let cfg = &p.config;
            let data = p.load_dataset()?;
            let init = Generator::new(cfg.model.generator_spec(), cfg.seed)?;
            let fid_initial = sample_fid(
                &init,
                &data.images,
                &p.extractor,
                cfg.eval.num_samples,
                cfg.seed,
            )?;
            let train = cfg.teacher.to_distill(cfg.seed);
            let ckpt_dir = (train.checkpoint_every > 0).then(|| p.run.checkpoint("teacher"));
            let outputs = LoopOutputs {
                checkpoint_dir: ckpt_dir,
                diagnostics_path: Some(p.run.metrics("teacher_diagnostics.json")),
            };
            let out = train_teacher(&data.images, &cfg.model, &cfg.teacher, cfg.seed, &outputs)?;
            let fid_final = sample_fid(
                &out.student,
                &data.images,
                &p.extractor,
                cfg.eval.num_samples,
                cfg.seed,
            )?;
            info!("teacher FID {fid_initial:.3} -> {fid_final:.3}");

            let g_path = p.run.checkpoint("teacher_G.ckpt");
            let d_path = p.run.checkpoint("teacher_D.ckpt");
            let g_ckpt = ModelCheckpoint::from_generator(&out.student)
                .with_meta("role", "teacher")
                .with_meta("steps", train.steps);
            g_ckpt.save(&g_path)?;
            ModelCheckpoint::from_encoder(&out.discriminator)
                .with_meta("role", "teacher")
                .save(&d_path)?;
            let csv = p.run.metrics("teacher_history.csv");
            std::fs::write(&csv, history_csv(&out.history))?;
            let summary = TeacherSummary {
                steps: train.steps,
                final_losses: out.history.last().cloned(),
                fid_initial,
                fid_final,
                fid_samples: cfg.eval.num_samples,
                sample_grid_seed: sample_grid_seed(cfg.seed),
                params_hash: g_ckpt.params_hash(),
            };
            let json = p.run.metrics("teacher.json");
            write_json(&json, &summary)?;
            let grid = p.run.plots("teacher_samples.png");
            save_grid(
                &out.student
                    .generate(&sample_grid_latents(&out.student, cfg.seed))?,
                8,
                2,
                &grid,
            )?;
            let plot = p.run.plots("teacher_loss.svg");
            save_loss_plot(&plot, "teacher training", &out.history)?;
            Ok(vec![g_path, d_path, csv, json, grid, plot])
        })
    }

    pub fn prune(&mut self) -> Result<StageStatus> {
        let teacher = ModelRef::Teacher.path(&self.run);
        self.require(&teacher, "train-teacher")?;
        let key = (&self.config.pruning, &self.config.masks);
        let mut inputs = vec![teacher.as_path()];
        inputs.extend(self.extractor_inputs());
        let hash = stage_input_hash("prune", &key, &inputs)?;
        self.stage("prune", hash, |p| {
            let cfg = &p.config.pruning;
            let g = p.load_generator(&ModelRef::Teacher)?;
            let provider = p.mask_provider()?;
            let saliency = compute_saliency(&g, cfg.metric, provider.as_ref(), &cfg.ca)?;
            let plan = select_channels(&saliency, cfg.ratio)?;
            let pruned = remove_channels(&g, &plan)?;
            let reference = select_channels(
                &compute_saliency(&g, Metric::L1Out, provider.as_ref(), &cfg.ca)?,
                cfg.ratio,
            )?;
            let same = reference.remove == plan.remove;
            let note = if cfg.metric == Metric::L1Out {
                "metric is l1_out".to_string()
            } else if same {
                format!(
                    "{} selects the same channels as l1_out at ratio {}",
                    cfg.metric.as_str(),
                    cfg.ratio
                )
            } else {
                format!(
                    "{} and l1_out select different channels at ratio {}",
                    cfg.metric.as_str(),
                    cfg.ratio
                )
            };
            info!("{note}");

            let sal_path = p.run.metrics("saliency.json");
            write_json(&sal_path, &saliency)?;
            let plan_path = p.run.metrics("plan.json");
            write_json(&plan_path, &plan)?;
            let ckpt = ModelCheckpoint::from_generator(&pruned)
                .with_meta("role", "pruned")
                .with_meta("metric", cfg.metric.as_str())
                .with_meta("ratio", cfg.ratio);
            let ckpt_path = p.run.checkpoint("pruned_G.ckpt");
            ckpt.save(&ckpt_path)?;
            let summary = PruneSummary {
                metric: cfg.metric,
                ratio: cfg.ratio,
                removed_channels: plan.removed_count(),
                teacher_flops: flops_estimate(&g.spec)?,
                pruned_flops: flops_estimate(&pruned.spec)?,
                teacher_params: g.param_count(),
                pruned_params: pruned.param_count(),
                same_as_l1_out: same,
                note,
                pruned_hash: ckpt.params_hash(),
            };
            let summary_path = p.run.metrics("prune.json");
            write_json(&summary_path, &summary)?;
            Ok(vec![sal_path, plan_path, ckpt_path, summary_path])
        })
    }

    pub fn distill(&mut self) -> Result<StageStatus> {
        let teacher_g = ModelRef::Teacher.path(&self.run);
        let teacher_d = self.run.checkpoint("teacher_D.ckpt");
        let pruned = ModelRef::Pruned.path(&self.run);
        self.require(&teacher_d, "train-teacher")?;
        self.require(&pruned, "prune")?;
        let files = self.dataset_files();
        let key = (&self.config.distill, &self.config.masks);
        let mut inputs: Vec<&Path> =
            vec![teacher_g.as_path(), teacher_d.as_path(), pruned.as_path()];
        inputs.extend(files.iter().map(PathBuf::as_path));
        inputs.extend(self.extractor_inputs());
        let hash = stage_input_hash("distill", &key, &inputs)?;
        self.stage("distill", hash, |p| {
            let cfg = &p.config.distill;
            let data = p.load_dataset()?;
            let teacher = p.load_generator(&ModelRef::Teacher)?;
            let student = p.load_generator(&ModelRef::Pruned)?;
            let disc =
                init_student_discriminator(&ModelCheckpoint::load(&teacher_d)?.to_encoder()?);
            let provider = if cfg.content_aware {
                Some(p.mask_provider()?)
            } else {
                None
            };
            let metric = cfg.perceptual_active().then(|| p.extractor.perceptual());
            let inputs = DistillInputs {
                teacher: cfg.kd_active().then_some(&teacher),
                dataset: &data.images,
                mask_provider: provider.as_deref(),
                perceptual: metric.as_ref(),
            };
            let ckpt_dir = (cfg.checkpoint_every > 0).then(|| p.run.checkpoint("distill"));
            let outputs = LoopOutputs {
                checkpoint_dir: ckpt_dir,
                diagnostics_path: Some(p.run.metrics("distill_diagnostics.json")),
            };
            let out = distill_loop(student, disc, &inputs, cfg, &outputs)?;

            let g_path = p.run.checkpoint("student_G.ckpt");
            let d_path = p.run.checkpoint("student_D.ckpt");
            let g_ckpt = ModelCheckpoint::from_generator(&out.student).with_meta("role", "student");
            g_ckpt.save(&g_path)?;
            ModelCheckpoint::from_encoder(&out.discriminator)
                .with_meta("role", "student")
                .save(&d_path)?;
            let csv = p.run.metrics("distill_history.csv");
            std::fs::write(&csv, history_csv(&out.history))?;
            let summary = DistillSummary {
                regime: regime_of(cfg),
                loss_terms: loss_terms(cfg),
                content_aware: cfg.content_aware,
                lambda_norm: if cfg.norm_active() {
                    cfg.lambda_norm
                } else {
                    0.0
                },
                gamma_per: if cfg.perceptual_active() {
                    cfg.gamma_per
                } else {
                    0.0
                },
                steps: cfg.steps,
                final_losses: out.history.last().cloned(),
                student_flops: flops_estimate(&out.student.spec)?,
                student_params: out.student.param_count(),
                student_hash: g_ckpt.params_hash(),
            };
            let json = p.run.metrics("distill.json");
            write_json(&json, &summary)?;
            let grid = p.run.plots("student_samples.png");
            save_grid(
                &out.student
                    .generate(&sample_grid_latents(&out.student, p.config.seed))?,
                8,
                2,
                &grid,
            )?;
            let plot = p.run.plots("distill_loss.svg");
            save_loss_plot(&plot, "distillation", &out.history)?;
            Ok(vec![g_path, d_path, csv, json, grid, plot])
        })
    }

    pub fn held_out_targets(&self, count: usize) -> Result<Tensor<f32>> {
        Ok(ToyDataset::render(&held_out_config(&self.config, count))?.images)
    }

    fn load_images(&self, source: &ImageSource) -> Result<Tensor<f32>> {
        match source {
            ImageSource::Files(paths) => {
                let images = paths.iter().map(load_image).collect::<Result<Vec<_>>>()?;
                Tensor::stack(&images)
            }
            ImageSource::HeldOut(idx) => {
                let count = idx.iter().max().map_or(0, |m| m + 1);
                Ok(self.held_out_targets(count)?.gather0(idx))
            }
        }
    }

    pub fn eval(&mut self, model: &ModelRef) -> Result<StageStatus> {
        let ckpt = model.path(&self.run);
        self.require(&ckpt, "the stage producing it")?;
        let files = self.dataset_files();
        let label = model.label();
        let key = (&self.config.eval, &self.config.masks, &self.config.dataset);
        let mut inputs: Vec<&Path> = vec![ckpt.as_path()];
        inputs.extend(files.iter().map(PathBuf::as_path));
        inputs.extend(self.extractor_inputs());
        let hash = stage_input_hash("eval", &key, &inputs)?;
        self.stage(&format!("eval-{label}"), hash, |p| {
            let cfg = &p.config.eval;
            let g = p.load_generator(model)?;
            let data = p.load_dataset()?;
            let targets = p.held_out_targets(cfg.projection_targets)?;
            let metric = p.extractor.perceptual();
            let provider = p.mask_provider()?;
            let (report, projections) = evaluate(
                &g,
                &data.images,
                &targets,
                &p.extractor,
                &metric,
                provider.as_ref(),
                cfg,
            )?;
            info!(
                "{label}: FID {:.3}, IS {:.3}, PPL {:.3e}, PSNR {:.2}",
                report.fid, report.is_mean, report.ppl, report.psnr_mean
            );
            let report_path = p.run.metrics(&format!("eval_{label}.json"));
            write_json(&report_path, &report)?;
            let proj_path = p.run.metrics(&format!("projections_{label}.json"));
            write_json(&proj_path, &projections)?;
            let mut outputs = vec![report_path, proj_path];
            if !projections.is_empty() {
                let sheet = p.run.plots(&format!("projections_{label}.png"));
                save_pairs(&targets, projections.iter().map(|r| &r.image), &sheet)?;
                outputs.push(sheet);
            }
            Ok(outputs)
        })
    }

    pub fn project(&mut self, model: &ModelRef, source: &ImageSource) -> Result<StageStatus> {
        let ckpt = model.path(&self.run);
        self.require(&ckpt, "the stage producing it")?;
        let label = model.label();
        let mut inputs: Vec<&Path> = vec![ckpt.as_path()];
        let held: Vec<usize> = match source {
            ImageSource::Files(paths) => {
                inputs.extend(paths.iter().map(PathBuf::as_path));
                Vec::new()
            }
            ImageSource::HeldOut(idx) => idx.clone(),
        };
        inputs.extend(self.extractor_inputs());
        let key = (
            &self.config.eval.projection,
            &self.config.masks,
            &self.config.dataset,
            held,
        );
        let hash = stage_input_hash("project", &key, &inputs)?;
        self.stage(&format!("project-{label}"), hash, |p| {
            let g = p.load_generator(model)?;
            let targets = p.load_images(source)?;
            let metric = p.extractor.perceptual();
            let provider = p.mask_provider()?;
            let (n, ..) = targets.dims4()?;
            let results = (0..n)
                .map(|i| {
                    project_image(
                        &g,
                        &targets.index0(i),
                        &metric,
                        provider.as_ref(),
                        &p.config.eval.projection,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let json = p.run.metrics(&format!("project_{label}.json"));
            write_json(&json, &results)?;
            let sheet = p.run.plots(&format!("project_{label}.png"));
            save_pairs(&targets, results.iter().map(|r| &r.image), &sheet)?;
            Ok(vec![json, sheet])
        })
    }

    pub fn edit(&mut self, model: &ModelRef, source: &ImageSource) -> Result<StageStatus> {
        let ckpt = model.path(&self.run);
        self.require(&ckpt, "the stage producing it")?;
        let label = model.label();
        let mut inputs: Vec<&Path> = vec![ckpt.as_path()];
        let held: Vec<usize> = match source {
            ImageSource::Files(paths) => {
                inputs.extend(paths.iter().map(PathBuf::as_path));
                Vec::new()
            }
            ImageSource::HeldOut(idx) => idx.clone(),
        };
        inputs.extend(self.extractor_inputs());
        let key = (
            &self.config.edit,
            &self.config.eval.projection,
            &self.config.masks,
            &self.config.dataset,
            held,
        );
        let hash = stage_input_hash("edit", &key, &inputs)?;
        self.stage(&format!("edit-{label}"), hash, |p| {
            let g = p.load_generator(model)?;
            let targets = p.load_images(source)?;
            if targets.dim(0) != 2 {
                return Err(Error::Validation(format!(
                    "edit takes exactly two images, got {}",
                    targets.dim(0)
                )));
            }
            let metric = p.extractor.perceptual();
            let provider = p.mask_provider()?;
            let layers = g.spec.num_layers();
            let codes = (0..2)
                .map(|i| {
                    let r = project_image(
                        &g,
                        &targets.index0(i),
                        &metric,
                        provider.as_ref(),
                        &p.config.eval.projection,
                    )?;
                    Ok(LayeredCode::broadcast(&r.latent, layers))
                })
                .collect::<Result<Vec<_>>>()?;
            let sheets = edit_sheets(&g, &codes[0], &codes[1], &p.config, &label, &p.run)?;
            Ok(sheets)
        })
    }

    /// Trains a feature network on this run's dataset and stores it with its held-out accuracy.
    pub fn train_extractor(&mut self, training: &ExtractorTraining) -> Result<StageStatus> {
        let files = self.dataset_files();
        self.require(&files[0], "make-dataset")?;
        let inputs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
        let hash = stage_input_hash("train-extractor", training, &inputs)?;
        self.stage("train-extractor", hash, |p| {
            let data = p.load_dataset()?;
            let classes = data.config.classes.len();
            let ex = train_extractor(&data.images, &data.labels, classes, training)?;
            let held = ToyDataset::render(&held_out_config(&p.config, 1000))?;
            let accuracy = ex.accuracy(&held.images, &held.labels)?;
            info!("extractor held-out accuracy {accuracy:.4}");
            let path = p.run.checkpoint("extractor.ckpt");
            ModelCheckpoint::from_encoder(&ex.net)
                .with_meta("held_out_accuracy", accuracy)
                .save(&path)?;
            let json = p.run.metrics("extractor.json");
            write_json(
                &json,
                &serde_json::json!({ "held_out_accuracy": accuracy, "training": training }),
            )?;
            Ok(vec![path, json])
        })
    }

    /// Dataset, teacher, pruning, distillation and evaluation of teacher and student.
    pub fn run_all(&mut self) -> Result<()> {
        self.make_dataset()?;
        self.train_teacher()?;
        self.prune()?;
        self.distill()?;
        self.eval(&ModelRef::Teacher)?;
        self.eval(&ModelRef::Student)?;
        Ok(())
    }
}

/// Two-row sheet: `(n, c, h, w)` targets on top, `(c, h, w)` reconstructions below.
fn save_pairs<'a>(
    targets: &Tensor<f32>,
    recon: impl Iterator<Item = &'a Tensor<f32>>,
    path: &Path,
) -> Result<()> {
    let recon: Vec<Tensor<f32>> = recon.cloned().collect();
    let n = recon.len();
    let mut rows: Vec<Tensor<f32>> = (0..n).map(|i| targets.index0(i)).collect();
    rows.extend(recon);
    save_grid(&Tensor::stack(&rows)?, n, 2, path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditFrame {
    pub sheet: String,
    pub index: usize,
    pub operation: String,
    pub parameter: f64,
    /// Principal direction for traversal frames.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub component: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditManifest {
    pub model: String,
    pub code_a: LayeredCode,
    pub code_b: LayeredCode,
    pub explained_variance: Vec<f64>,
    pub frames: Vec<EditFrame>,
}

/// Mixing grid over the crossover layer, morph strip over β and traversal strips
/// over σ, plus a manifest listing every frame.
pub fn edit_sheets(
    g: &Generator<f32>,
    a: &LayeredCode,
    b: &LayeredCode,
    cfg: &RunConfig,
    label: &str,
    run: &RunDir,
) -> Result<Vec<PathBuf>> {
    let ecfg = &cfg.edit;
    let layers = g.spec.num_layers();
    let mut frames = Vec::new();
    let mut record = |sheet: &str, operation: &str, parameter: f64, component: Option<usize>| {
        let index = frames
            .iter()
            .filter(|f: &&EditFrame| f.sheet == sheet)
            .count();
        frames.push(EditFrame {
            sheet: sheet.into(),
            index,
            operation: operation.into(),
            parameter,
            component,
        });
    };

    let mix_name = format!("edit_mix_{label}.png");
    let mut mix = Vec::new();
    for (first, second, op) in [(a, b, "mix_a_then_b"), (b, a, "mix_b_then_a")] {
        for l in 1..=layers + 1 {
            mix.push(style_mix(first, second, l)?);
            record(&mix_name, op, l as f64, None);
        }
    }
    let mix_path = run.plots(&mix_name);
    save_grid(&render_codes(g, &mix)?, layers + 1, 2, &mix_path)?;

    let morph_name = format!("edit_morph_{label}.png");
    let mut strip = Vec::new();
    for i in 0..ecfg.morph_frames {
        let beta = i as f64 / (ecfg.morph_frames - 1) as f64;
        strip.push(morph(a, b, beta)?);
        record(&morph_name, "morph", beta, None);
    }
    let morph_path = run.plots(&morph_name);
    save_grid(&render_codes(g, &strip)?, ecfg.morph_frames, 2, &morph_path)?;

    let mut rng = seeded_rng(cfg.seed ^ 0x6A5);
    let d = g.latent_dim();
    let samples = Tensor::<f64>::randn(&[ecfg.pca_samples, d], 1.0, &mut rng);
    let basis = pca_directions(
        &nalgebra::DMatrix::from_row_slice(ecfg.pca_samples, d, samples.data()),
        ecfg.components,
    )?;
    let trav_name = format!("edit_traverse_{label}.png");
    let mut trav = Vec::new();
    for (k, u) in basis.components.iter().enumerate() {
        trav.extend(traverse(a, u, &ecfg.sigmas)?);
        for &s in &ecfg.sigmas {
            record(&trav_name, "traverse", s, Some(k));
        }
    }
    let trav_path = run.plots(&trav_name);
    save_grid(&render_codes(g, &trav)?, ecfg.sigmas.len(), 2, &trav_path)?;

    let manifest = EditManifest {
        model: label.into(),
        code_a: a.clone(),
        code_b: b.clone(),
        explained_variance: basis.explained_variance,
        frames,
    };
    let manifest_path = run.metrics(&format!("edit_{label}.json"));
    write_json(&manifest_path, &manifest)?;
    Ok(vec![mix_path, morph_path, trav_path, manifest_path])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: String,
    pub model: String,
    /// Full-size FLOPs over this model's FLOPs.
    pub acceleration: f64,
    pub report: EvalReport,
}

/// Collects `metrics/eval_*.json` from every run directory into a table, a JSON
/// file and an FID-versus-acceleration plot in `out_dir`.
pub fn report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for dir in run_dirs {
        let cfg = RunConfig::load(dir.join(CONFIG_FILE))?;
        let full = flops_estimate(&cfg.model.generator_spec())? as f64;
        let mut evals: Vec<PathBuf> = std::fs::read_dir(dir.join("metrics"))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                let name = p
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                name.starts_with("eval_") && name.ends_with(".json")
            })
            .collect();
        evals.sort();
        for path in evals {
            let report: EvalReport = crate::pipeline::run::read_json(&path)?;
            let model = path
                .file_stem()
                .expect("file")
                .to_string_lossy()
                .trim_start_matches("eval_")
                .to_string();
            rows.push(ReportRow {
                run: cfg.name.clone(),
                model,
                acceleration: full / report.flops_estimate as f64,
                report,
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::Validation(
            "no evaluation results found; run `eval` first".into(),
        ));
    }
    std::fs::create_dir_all(out_dir)?;
    write_json(out_dir.join("report.json"), &rows)?;

    let mut md = String::from("| run | model | acceleration | FID | IS | PPL | PSNR | perceptual | CA-PSNR | CA-perceptual |\n");
    md.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
    for r in &rows {
        let e = &r.report;
        md.push_str(&format!(
            "| {} | {} | {:.2}x | {:.3} | {:.3} | {:.3e} | {:.2} | {:.4} | {:.2} | {:.4} |\n",
            r.run,
            r.model,
            r.acceleration,
            e.fid,
            e.is_mean,
            e.ppl,
            e.psnr_mean,
            e.perceptual_mean,
            e.ca_psnr_mean,
            e.ca_perceptual_mean
        ));
    }
    std::fs::write(out_dir.join("report.md"), md)?;

    let mut series: Vec<Series> = Vec::new();
    for r in &rows {
        match series.iter_mut().find(|s| s.name == r.run) {
            Some(s) => s.points.push((r.acceleration, r.report.fid)),
            None => series.push(Series {
                name: r.run.clone(),
                points: vec![(r.acceleration, r.report.fid)],
            }),
        }
    }
    for s in &mut series {
        s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    std::fs::write(
        out_dir.join("fid_vs_acceleration.svg"),
        line_chart("FID vs acceleration", "FLOPs reduction (x)", "FID", &series),
    )?;
    Ok(rows)
}

/// Run directories under `output_dir` that contain a config dump.
pub fn discover_runs(output_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(output_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(CONFIG_FILE).exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}
