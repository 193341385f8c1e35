//! Dense tensors, reverse-mode differentiation, Adam and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod hash;
pub mod kernels;
pub mod params;
pub mod rng;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use gradcheck::{finite_diff_check, param_grad_check};
pub use graph::{Graph, Var};
pub use params::{Bound, Grads, ParamStore};
pub use rng::SplitMix64;
pub use tensor::Tensor;
