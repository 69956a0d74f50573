pub mod embed;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod interpret;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod scene;
pub mod seq2seq;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use scalar::{DType, Scalar};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
