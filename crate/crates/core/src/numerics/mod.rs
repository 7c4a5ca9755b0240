//! Layer kernels with hand-written backward passes, finite-difference
//! gradient checking and the Adam optimizer.

mod adam;
mod gradcheck;
mod layers;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, relative_error, GradCheck};
pub use layers::{LayerCache, LayerSpec, Sequential, LAYER_NORM_EPS};
