//! Multi-condition human motion synthesis.
//!
//! A dense autodiff core ([`numerics`]) drives a multi-wise attention
//! diffusion transformer ([`attention`]), a DDPM with x_start
//! parameterisation ([`diffusion`]) and a dual-branch control scheme
//! ([`control`]) that adds audio conditioning to a frozen text model
//! through zero-initialised bridges. [`motion`] implements the 263-wide
//! per-frame motion features, [`metrics`] the evaluation suite and
//! [`pipeline`] the end-to-end synthetic experiments behind the CLI.

pub mod attention;
pub mod conditions;
pub mod control;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod motion;
pub mod numerics;
pub mod par;
pub mod pipeline;
pub mod train;

pub use error::{Error, Result};
