//! Generator/discriminator architectures, channel surgery and checkpoints.

mod block;
pub mod checkpoint;
pub mod encoder;
pub mod generator;
pub mod spec;
pub mod surgery;

pub use checkpoint::{params_hash, ModelCheckpoint, ModelSpec};
pub use encoder::{init_student_discriminator, ConvEncoder, Discriminator, EncoderForward};
pub use generator::{GenForward, GenGrads, Generator};
pub use spec::{EncoderSpec, GeneratorSpec, Head, LayerSpec};
pub use surgery::remove_channels;
