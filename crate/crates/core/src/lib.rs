//! Desk-scale model of an FPGA cell-sorting inference stack.
//!
//! - [`model`]: the student CNN, shape inference, weight files, float path
//! - [`quant`]: layer-level fixed-point emulation
//! - [`hw`]: reuse-factor driven latency/resource estimates
//! - [`pipeline`]: detection-to-trigger timing and frame-stream simulation
//! - [`calib`]: reliability bins, ECE/MCE, temperature scaling, rejection
//! - [`synth`]: seeded weights, images and logs for tests and demos
//!
//! Batch loops (agreement rates, Pareto sweeps, threshold sweeps) take an
//! [`Exec`] and run on rayon when the `parallel` feature is enabled.

pub mod calib;
pub mod error;
pub mod exec;
pub mod hw;
pub mod model;
pub mod pipeline;
pub mod quant;
pub mod report;
pub mod synth;

pub use error::{Error, Result};
pub use exec::Exec;
pub use model::{ModelConfig, TensorShape, WeightSet};
