//! Dual-space GAN with cross-space attention: model, training, editing,
//! inversion and evaluation on a synthetic shapes dataset.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod editing;
pub mod error;
pub mod extractor;
pub mod generator;
pub mod interaction;
pub mod inversion;
pub mod latent;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod svm;
pub mod training;

pub use autograd::{no_grad, Float, Tensor, Var};
pub use checkpoint::Checkpoint;
pub use config::{load_config, ModelConfig, Variant};
pub use error::{Error, Result};
pub use model::GeneratorStack;
