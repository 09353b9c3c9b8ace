//! Sample-quality metrics, latent projection and cost estimates.

pub mod extractor;
pub mod fid;
pub mod inception;
pub mod lbfgs;
pub mod perceptual;
pub mod ppl;
pub mod projection;
pub mod quality;
pub mod report;

pub use extractor::{train_extractor, Embedding, ExtractorTraining, FeatureExtractor};
pub use fid::fid;
pub use inception::inception_score_from_probs;
pub use perceptual::{PerceptualDistance, PerceptualMetric, PixelMse};
pub use ppl::{ppl, LatentGenerator};
pub use projection::{project_image, ProjectionConfig, ProjectionResult};
pub use quality::{flops_estimate, psnr, PSNR_CAP};
pub use report::{evaluate, sample_fid, sample_images, EvalConfig, EvalReport};
