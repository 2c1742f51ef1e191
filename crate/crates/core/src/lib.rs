//! Simulator for deploying DNNs on non-volatile compute-in-memory crossbars
//! with a Tiny Shared Block that absorbs device variation.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod crossbar;
pub mod data;
pub mod device;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod runner;
pub mod tensor;
pub mod tsb;

pub use error::{Error, Result};
pub use tensor::Tensor;
