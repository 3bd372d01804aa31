//! Dense tensors, reverse-mode differentiation, and optimization.

pub mod adam;
pub mod checkpoint;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::AdamState;
pub use params::ParamStore;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
