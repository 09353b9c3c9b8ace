use std::path::Path;

use gancomp::distill::Regime;
use gancomp::eval::extractor::FeatureExtractor;
use gancomp::eval::fid::fid;
use gancomp::eval::report::{sample_images, EvalReport};
use gancomp::model::{remove_channels, Generator, ModelCheckpoint};
use gancomp::pipeline::run::read_json;
use gancomp::pipeline::stages::{
    sample_grid_latents, DistillSummary, EditManifest, PruneSummary, TeacherSummary,
};
use gancomp::pipeline::{ImageSource, ModelRef, Pipeline, RunConfig, StageStatus};
use gancomp::pruning::PruningPlan;
use gancomp::Tensor;

fn small_config(dir: &Path, name: &str) -> RunConfig {
    let mut cfg = RunConfig::from_toml(
        r#"
        [dataset]
        count = 200
        [teacher]
        steps = 10
        log_every = 0
        [pruning.ca]
        num_samples = 16
        [distill]
        steps = 4
        batch_size = 4
        log_every = 0
        [eval]
        num_samples = 64
        ppl_pairs = 4
        projection_targets = 2
        [eval.projection]
        steps = 3
        init_samples = 16
        [edit]
        pca_samples = 64
        morph_frames = 5
        "#,
    )
    .unwrap();
    cfg.name = name.into();
    cfg.output_dir = dir.to_path_buf();
    cfg
}

fn trained(dir: &Path, name: &str) -> Pipeline {
    let mut p = Pipeline::open(small_config(dir, name), false).unwrap();
    p.make_dataset().unwrap();
    p.train_teacher().unwrap();
    p
}

#[test]
fn teacher_training_lowers_fid() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), "fid");
    cfg.dataset.count = 1000;
    cfg.teacher.steps = 400;
    cfg.eval.num_samples = 1000;
    let mut p = Pipeline::open(cfg, false).unwrap();
    p.make_dataset().unwrap();
    p.train_teacher().unwrap();
    let s: TeacherSummary = read_json(p.run.metrics("teacher.json")).unwrap();
    assert!(
        s.fid_final < s.fid_initial,
        "{} -> {}",
        s.fid_initial,
        s.fid_final
    );
}

#[test]
fn teacher_checkpoint_regenerates_sample_grid() {
    let dir = tempfile::tempdir().unwrap();
    let p = trained(dir.path(), "grid");
    let g = p.load_generator(&ModelRef::Teacher).unwrap();
    let grid = g.generate(&sample_grid_latents(&g, p.config.seed)).unwrap();
    let again = ModelCheckpoint::load(p.run.checkpoint("teacher_G.ckpt"))
        .unwrap()
        .to_generator()
        .unwrap();
    assert_eq!(
        grid,
        again
            .generate(&sample_grid_latents(&again, p.config.seed))
            .unwrap()
    );
    let s: TeacherSummary = read_json(p.run.metrics("teacher.json")).unwrap();
    assert_eq!(
        s.params_hash,
        ModelCheckpoint::from_generator(&g).params_hash()
    );
}

#[test]
fn zero_step_teacher_is_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), "zero");
    cfg.teacher.steps = 0;
    let mut p = Pipeline::open(cfg, false).unwrap();
    p.make_dataset().unwrap();
    p.train_teacher().unwrap();
    let init = Generator::<f32>::new(p.config.model.generator_spec(), p.config.seed).unwrap();
    assert_eq!(p.load_generator(&ModelRef::Teacher).unwrap(), init);
}

#[test]
fn prune_artifacts_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = trained(dir.path(), "prune");
    p.config.pruning.ratio = 0.3;
    p.prune().unwrap();
    let teacher = p.load_generator(&ModelRef::Teacher).unwrap();
    let plan: PruningPlan = read_json(p.run.metrics("plan.json")).unwrap();
    let again = remove_channels(&teacher, &plan).unwrap();
    let s: PruneSummary = read_json(p.run.metrics("prune.json")).unwrap();
    assert_eq!(
        ModelCheckpoint::from_generator(&again).params_hash(),
        s.pruned_hash
    );
    assert!(s.pruned_flops < s.teacher_flops);
    assert!(s.pruned_params < s.teacher_params);
    assert!(!s.note.is_empty());
}

#[test]
fn distill_summary_names_loss_terms() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = trained(dir.path(), "distill");
    p.prune().unwrap();
    p.config.distill = p
        .config
        .distill
        .clone()
        .with_regime(Regime::NormOutputPerceptual, true);
    p.distill().unwrap();
    let s: DistillSummary = read_json(p.run.metrics("distill.json")).unwrap();
    assert_eq!(s.regime, Some(Regime::NormOutputPerceptual));
    assert!(s.content_aware);
    assert!(s.loss_terms.iter().any(|t| t.contains("norm")));
    assert!(s.loss_terms.iter().any(|t| t.contains("perceptual")));

    p.config.distill = p.config.distill.clone().with_regime(Regime::NoKd, false);
    assert_eq!(
        (p.config.distill.lambda_norm, p.config.distill.gamma_per),
        (0.0, 0.0)
    );
    p.distill().unwrap();
    let s: DistillSummary = read_json(p.run.metrics("distill.json")).unwrap();
    assert_eq!(s.regime, Some(Regime::NoKd));
    assert_eq!((s.lambda_norm, s.gamma_per), (0.0, 0.0));
}

#[test]
fn eval_is_finite_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = trained(dir.path(), "eval");
    p.eval(&ModelRef::Teacher).unwrap();
    let path = p.run.metrics("eval_teacher.json");
    let first = std::fs::read(&path).unwrap();
    let report: EvalReport = read_json(&path).unwrap();
    assert!(report.all_finite());
    assert!(report.flops_estimate > 0 && report.param_count > 0);
    p.eval(&ModelRef::Teacher).unwrap();
    assert_eq!(first, std::fs::read(&path).unwrap());
}

#[test]
fn self_fid_is_near_zero() {
    let g = Generator::<f32>::new(RunConfig::default().model.generator_spec(), 4).unwrap();
    let ex = FeatureExtractor::bundled();
    let a = ex
        .embed(&sample_images(&g, 5000, 1, 250).unwrap(), 250)
        .unwrap()
        .features;
    let b = ex
        .embed(&sample_images(&g, 5000, 2, 250).unwrap(), 250)
        .unwrap()
        .features;
    let value = fid(&a, &b).unwrap();
    assert!(value < 0.5, "self FID {value}");
}

#[test]
fn edit_sheets_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = trained(dir.path(), "edit");
    p.edit(&ModelRef::Teacher, &ImageSource::HeldOut(vec![0, 1]))
        .unwrap();
    for sheet in [
        "edit_mix_teacher.png",
        "edit_morph_teacher.png",
        "edit_traverse_teacher.png",
    ] {
        assert!(p.run.plots(sheet).exists(), "{sheet}");
    }
    let m: EditManifest = read_json(p.run.metrics("edit_teacher.json")).unwrap();
    let g = p.load_generator(&ModelRef::Teacher).unwrap();
    let layers = g.spec.num_layers();
    let e = &p.config.edit;
    let count = |sheet: &str| {
        m.frames
            .iter()
            .filter(|f| f.sheet.starts_with(sheet))
            .count()
    };
    assert_eq!(count("edit_mix"), 2 * (layers + 1));
    assert_eq!(count("edit_morph"), e.morph_frames);
    assert_eq!(count("edit_traverse"), e.components * e.sigmas.len());

    use gancomp::editing::{morph, render_codes, traverse};
    let render = |c| render_codes(&g, &[c]).unwrap();
    let ends = [
        morph(&m.code_a, &m.code_b, 0.0).unwrap(),
        morph(&m.code_a, &m.code_b, 1.0).unwrap(),
    ];
    assert_eq!(render(ends[0].clone()), render(m.code_a.clone()));
    assert_eq!(render(ends[1].clone()), render(m.code_b.clone()));
    let dir_vec = vec![1.0; g.latent_dim()];
    let zero = traverse(&m.code_a, &dir_vec, &[0.0]).unwrap();
    assert_eq!(render(zero[0].clone()), render(m.code_a.clone()));
}

#[test]
fn resume_skips_completed_stages() {
    let dir = tempfile::tempdir().unwrap();
    drop(trained(dir.path(), "resume"));
    let mut p = Pipeline::open(small_config(dir.path(), "resume"), true).unwrap();
    assert_eq!(p.make_dataset().unwrap(), StageStatus::Skipped);
    assert_eq!(p.train_teacher().unwrap(), StageStatus::Skipped);
    assert_eq!(p.prune().unwrap(), StageStatus::Ran);

    // a changed output forces the stage to run again
    std::fs::write(p.run.metrics("teacher.json"), "{}").unwrap();
    assert_eq!(p.train_teacher().unwrap(), StageStatus::Ran);
    // so does a changed config section
    p.config.pruning.ratio = 0.3;
    assert_eq!(p.prune().unwrap(), StageStatus::Ran);
    assert_eq!(p.prune().unwrap(), StageStatus::Skipped);
}

#[test]
fn dumped_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let p = trained(dir.path(), "dump");
    let dumped = RunConfig::load(p.run.root().join("config.toml")).unwrap();
    assert_eq!(dumped, p.config);
    let mut again = dumped.clone();
    again.name = "dump2".into();
    let q = trained(dir.path(), "dump2");
    let a: TeacherSummary = read_json(p.run.metrics("teacher.json")).unwrap();
    let b: TeacherSummary = read_json(q.run.metrics("teacher.json")).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        again.resolved().to_toml().unwrap().replace("dump2", "dump"),
        dumped.to_toml().unwrap()
    );
}

#[test]
fn missing_inputs_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::open(small_config(dir.path(), "missing"), false).unwrap();
    let err = p.train_teacher().unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
    let mut cfg = small_config(dir.path(), "bad");
    cfg.dataset.count = 0;
    assert_eq!(Pipeline::open(cfg, false).err().unwrap().exit_code(), 2);
    let _: Tensor<f32> = p.held_out_targets(2).unwrap();
}
