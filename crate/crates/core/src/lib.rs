//! Contrastive self-supervised audio representations.
//!
//! Pairs of 960 ms segments drawn from the same clip are pushed together
//! under a learned bilinear similarity while the other clips of the batch act
//! as negatives. The pre-trained encoder is then evaluated with frozen linear
//! probes or fine-tuned on labeled data.
//!
//! Numeric code is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks); the aliases below fix the common choice.

pub mod ablation;
pub mod audio;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod model;
pub mod numerics;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type ModelParams32 = model::ModelParams<f32>;
pub type ModelParams64 = model::ModelParams<f64>;
pub type Frontend32 = frontend::Frontend<f32>;
pub type Frontend64 = frontend::Frontend<f64>;
