//! Edge-enhanced windowed-attention transformer for low-dose image denoising.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod edge;
pub mod layers;
pub mod data;
pub mod lewin;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
