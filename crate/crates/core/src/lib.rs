//! Semi-supervised segmentation with a conventional network and an adapted
//! foundation network that teach each other through confidence-weighted
//! ensemble pseudo-labels.

pub mod engine;
pub mod data;
pub mod error;
pub mod metrics;
pub mod models;
pub mod scalar;
pub mod synfoc;
pub mod trainer;

pub use engine::{LabelMap, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
