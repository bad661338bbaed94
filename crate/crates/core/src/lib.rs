//! Bipartite-attention image GANs on a small reverse-mode autodiff core.

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod networks;
pub mod params;
pub mod seeds;
pub mod style;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
