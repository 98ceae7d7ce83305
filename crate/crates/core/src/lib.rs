//! Class-conditional transfer of a pretrained unconditional style-based
//! generator through hypernetwork weight modulation.
//!
//! Every numeric type is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod adversarial;
pub mod alignment;
pub mod augment;
pub mod autograd;
pub mod data;
pub mod error;
pub mod hyper;
pub mod metrics;
pub mod modulation;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod synthesis;
pub mod tensor;
pub mod train;

pub use adversarial::{ContrastiveConfig, Discriminator};
pub use alignment::{self_align, AlignmentConfig, AlignmentReport};
pub use autograd::{no_grad, Var};
pub use data::ImageSet;
pub use error::{Error, Result};
pub use hyper::{ClassInput, ConditioningConfig, Hypernetwork};
pub use metrics::{evaluate_generator, EvalConfig, MetricReport};
pub use modulation::{ModulatedLayer, ModulationParams, ModulationShape};
pub use scalar::Scalar;
pub use synthesis::{ClassSpec, ConditioningMode, Generator, SynthesisConfig};
pub use tensor::Tensor;
pub use train::{new_transfer, pretrain_source, InitKind, PretrainConfig, TrainConfig, Trainer, TrainingMode};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Generator32 = Generator<f32>;
pub type Generator64 = Generator<f64>;
pub type Discriminator32 = Discriminator<f32>;
pub type Discriminator64 = Discriminator<f64>;
pub type Trainer32 = Trainer<f32>;
pub type Trainer64 = Trainer<f64>;
pub type ImageSet32 = ImageSet<f32>;
pub type ImageSet64 = ImageSet<f64>;
