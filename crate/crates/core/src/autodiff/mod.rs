//! Reverse-mode differentiation over dense tensors, with the 3D primitives
//! needed by the codec, density and segmentation networks.
//!
//! Training runs in `f32`; the same code is instantiated at `f64` for
//! finite-difference checks.

pub mod attention;
pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod spectral;
pub mod tape;
pub mod tensor;

pub use attention::{draw_features, AttentionMode};
pub use checkpoint::Checkpoint;
pub use optim::{AdamConfig, OptimizerState};
pub use params::{Bound, Param, ParamId, ParamStore};
pub use tape::{dropout_mask, Activation, Gradients, LossKind, LossTarget, NormKind, Tape, Var};
pub use tensor::{Real, Tensor};
