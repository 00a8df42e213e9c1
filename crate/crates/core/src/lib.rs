//! Fourier-modulated implicit neural representations for multiband images.
//!
//! A small sine-activated coordinate network is overfit to every band of one
//! image at once. A hypernetwork, conditioned on each band's ground sample
//! distance and channel index, generates per-band Fourier modulations that
//! are inserted between low-rank factors of the hidden weights. The trained
//! parameters are the compressed image.
//!
//! This crate is `no_std` (with `alloc`) and contains only the numerics:
//! matrices, the model and its reverse pass, training, metrics, and the
//! synthetic test-image generator. File formats and the command line live in
//! the `implisat` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
pub mod error;
pub mod grad;
pub mod metrics;
pub mod model;
pub mod render;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{ModelConfig, ModelParams, ModulationMode};
pub use tensor::{Matrix, Rng};
