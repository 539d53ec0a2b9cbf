//! Dense tensors, reverse-mode differentiation, Adam and the layers built on them.

pub mod adam;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, param_finite_diff_check};
pub use nn::{dice, BatchStats, Dice, Linear, Mlp, MlpStats, Norm, OutputActivation};
pub use params::{Group, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
