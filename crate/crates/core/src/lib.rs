//! GAN-based image/label data augmentation for cluttered waste scenes and
//! semantic-aware suction grasp inference.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` for training, `f64`
//! for gradient checks); the aliases below name the common instantiations.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod evalkit;
pub mod gan;
pub mod grasp;
pub mod losses;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod scenegen;
pub mod tensor;
pub mod training;

pub use autodiff::{Graph, Var};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type GanModel32 = gan::GanModel<f32>;
pub type GanModel64 = gan::GanModel<f64>;
