use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gancomp::distill::Regime;
use gancomp::eval::extractor::ExtractorTraining;
use gancomp::pipeline::{discover_runs, report, ImageSource, ModelRef, Pipeline, RunConfig};
use gancomp::pruning::Metric;
use gancomp::Result;

/// Content-aware pruning and distillation of small GANs.
///
/// Every stage writes into `<output_dir>/<name>/` and records its artifacts in
/// `manifest.json`. Exit codes: 0 success, 2 invalid input or config,
/// 3 numerical abort (a diagnostics file is left in `metrics/`).
#[derive(Parser)]
#[command(name = "gancomp", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override the run name.
    #[arg(long, global = true)]
    name: Option<String>,
    /// Override the output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Override the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Skip stages whose inputs and outputs match the manifest.
    #[arg(long, global = true)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective config as TOML.
    Config,
    /// Render the toy dataset.
    MakeDataset,
    /// Train the full-size generator and discriminator.
    TrainTeacher,
    /// Score channels, select a plan and build the pruned generator.
    Prune {
        #[arg(long)]
        metric: Option<Metric>,
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Fine-tune the pruned generator against the teacher.
    Distill {
        /// One of no_kd, norm_output, norm_intermediate, perceptual,
        /// norm_output_perceptual, norm_intermediate_perceptual.
        #[arg(long)]
        regime: Option<Regime>,
        /// Restrict the distillation losses to the content mask.
        #[arg(long)]
        content_aware: bool,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Compute the metric bundle for a generator.
    Eval {
        /// teacher, pruned, student or a checkpoint path.
        #[arg(long, default_value = "student")]
        model: ModelRef,
    },
    /// Project images into a generator's latent space.
    Project {
        #[arg(long, default_value = "student")]
        model: ModelRef,
        #[command(flatten)]
        images: ImageArgs,
    },
    /// Project two images and emit mixing, morphing and traversal sheets.
    Edit {
        #[arg(long, default_value = "student")]
        model: ModelRef,
        #[command(flatten)]
        images: ImageArgs,
    },
    /// Tabulate and plot every evaluated run.
    Report {
        /// Run directories; every run under the output directory when omitted.
        #[arg(long, num_args = 1..)]
        runs: Vec<PathBuf>,
        /// Destination; `<output_dir>/report` when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a feature network on this run's dataset.
    TrainExtractor {
        #[arg(long, default_value_t = ExtractorTraining::default().steps)]
        steps: usize,
    },
    /// make-dataset, train-teacher, prune, distill, then eval of teacher and student.
    Run,
}

#[derive(Args)]
struct ImageArgs {
    /// PNG files to use.
    #[arg(long = "image", num_args = 1..)]
    files: Vec<PathBuf>,
    /// Indices into the held-out render set, used when no files are given.
    #[arg(long, value_delimiter = ',', default_values_t = [0, 1])]
    held_out: Vec<usize>,
}

impl ImageArgs {
    fn source(self) -> ImageSource {
        if self.files.is_empty() {
            ImageSource::HeldOut(self.held_out)
        } else {
            ImageSource::Files(self.files)
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(name) = &common.name {
        cfg.name = name.clone();
    }
    if let Some(dir) = &common.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Config => {
            let cfg = cfg.resolved();
            cfg.validate()?;
            print!("{}", cfg.to_toml()?);
            return Ok(());
        }
        Command::Report { runs, out } => {
            let runs = if runs.is_empty() {
                discover_runs(&cfg.output_dir)?
            } else {
                runs
            };
            let out = out.unwrap_or_else(|| cfg.output_dir.join("report"));
            let rows = report(&runs, &out)?;
            println!(
                "{} evaluated models written to {}",
                rows.len(),
                out.display()
            );
            return Ok(());
        }
        Command::Prune { metric, ratio } => {
            cfg.pruning.metric = metric.unwrap_or(cfg.pruning.metric);
            cfg.pruning.ratio = ratio.unwrap_or(cfg.pruning.ratio);
        }
        Command::Distill {
            regime,
            content_aware,
            steps,
        } => {
            if let Some(r) = regime {
                cfg.distill = cfg.distill.with_regime(r, content_aware);
            } else if content_aware {
                cfg.distill.content_aware = true;
            }
            cfg.distill.steps = steps.unwrap_or(cfg.distill.steps);
        }
        _ => {}
    }
    let mut p = Pipeline::open(cfg, cli.common.resume)?;
    match cli.command {
        Command::MakeDataset => p.make_dataset().map(drop),
        Command::TrainTeacher => p.train_teacher().map(drop),
        Command::Prune { .. } => p.prune().map(drop),
        Command::Distill { .. } => p.distill().map(drop),
        Command::Eval { model } => p.eval(&model).map(drop),
        Command::Project { model, images } => p.project(&model, &images.source()).map(drop),
        Command::Edit { model, images } => p.edit(&model, &images.source()).map(drop),
        Command::TrainExtractor { steps } => p
            .train_extractor(&ExtractorTraining {
                steps,
                ..Default::default()
            })
            .map(drop),
        Command::Run => p.run_all(),
        Command::Config | Command::Report { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
