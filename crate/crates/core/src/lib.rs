//! Salient object detection with relational reasoning and parallel
//! multi-scale attention, on a small dense tensor engine with reverse-mode
//! autodiff.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, checkpoints and
//! the command-line tool live in the `rrnet` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

mod error;

pub mod attention;
pub mod check;
pub mod data;
pub mod graph;
pub mod init;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use network::{NetworkConfig, SaliencyPrediction};
pub use params::ParamSet;
pub use scalar::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
