pub mod attention;
pub mod bench;
mod binfmt;
pub mod checkpoint;
pub mod data;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod inspect;
pub mod model;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod taylor;
pub mod train;

pub use engine::{Gradients, Tape, Tensor, Var};
pub use error::{Error, FormatError, Result};
pub use rng::Rng;
pub use scalar::Scalar;
pub use model::{ModelConfig, PgotModel, PgotModel32, PgotModel64};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
