//! Split-inference privacy testbed.
//!
//! A client runs the first and last few layers of a network, a server runs the
//! middle. This crate provides:
//!
//! * [`nn`]: a small CPU network engine with split support and checkpoints,
//! * [`defense`]: the selective-ensemble defense and perturbation baselines,
//! * [`attack`]: a query-free model-inversion attack (shadow network + decoder),
//! * [`metrics`]: SSIM, PSNR and accuracy,
//! * [`transport`]: a loopback client/server tensor protocol with latency accounting,
//! * [`harness`]: configuration, datasets, experiment drivers and report emission.

pub mod attack;
pub mod data;
pub mod defense;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod transport;

pub use data::{LabeledDataset, Normalization};
pub use error::{Error, Result};
pub use tensor::Tensor;
