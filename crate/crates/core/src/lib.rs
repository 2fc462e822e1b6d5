//! Learned conditional sampling for tomographic reconstruction.
//!
//! A conditional variational autoencoder wraps an unrolled iterative refiner:
//! a student encoder maps the observed sinogram to a distribution over a
//! low-dimensional latent code, and a recurrent convolutional unit turns each
//! latent draw into one plausible reconstruction. Sample statistics give the
//! posterior mean and a per-pixel variance.
//!
//! This crate is `no_std` (with `alloc`) and holds every algorithm. File
//! formats, configuration and the command-line tool live in the companion
//! `tomocvae` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod baselines;
pub mod cvae;
pub mod data;
pub mod engine;
pub mod error;
pub mod exec;
pub mod grid;
pub mod linop;
pub mod metrics;
pub mod toyval;
pub mod tvops;

pub use error::{Error, Result};
pub use grid::{Grid, Image, Sinogram};
pub use linop::{LinearOperator, OperatorGeometry, RadonTransform};
