//! Learnable-prototype weakly supervised segmentation with a prototype
//! diversity regularizer.

pub mod autograd;
pub mod config;
pub mod container;
pub mod data_io;
pub mod diversity;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod mask_refiner;
pub mod model;
pub mod prototype;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use config::Config;
pub use error::{Error, Result};
pub use model::Model;
pub use tensor::Tensor;
