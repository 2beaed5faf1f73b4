//! Neural stereo video codec with hybrid disparity compensation.

pub mod autodiff;
pub mod bitio;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod em;
pub mod error;
pub mod evalkit;
pub mod fer;
pub mod hdc;
pub mod kernels;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
