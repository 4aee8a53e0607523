//! Hand-written f64 network stack: layers, generator, discriminator,
//! VGG-19 extractor, optimizer and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod discriminator;
pub mod generator;
pub mod layers;
pub mod spectral;
pub mod vgg;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use generator::{Generator, GeneratorConfig};
pub use layers::{Conv2d, ConvGrad};
pub use vgg::{Vgg19, VggSource};
