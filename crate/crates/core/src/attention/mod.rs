//! Multi-wise attention blocks and the MWNet denoiser.

pub mod mwnet;
pub mod ops;
pub mod spec;

pub use mwnet::{positional_encoding, sinusoidal, BranchModel, Mwnet};
pub use ops::{channel_wise_sa, cross_attention, feed_forward, film, linear, time_wise_sa, time_wise_sa_scaled, Qkv};
pub use spec::{BlockOrder, BlockSpec, ModuleKind, NormPlacement};
