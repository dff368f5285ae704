//! Complex-valued residual networks for wideband multi-signal spectrum
//! segmentation: IQ dataset synthesis, complex layers with split
//! real/imaginary gradients, focal-loss training, and segment-level metrics.

pub mod clayers;
pub mod cmodel;
pub mod ctensor;
pub mod error;
pub mod lad;
pub mod objectives;
pub mod parallel;
pub mod pipeline;
pub mod siggen;

#[cfg(test)]
mod testutil;

pub use ctensor::{dft, fft, ComplexTensor, IqFrame, Precision, Real, SpectrumFrame};
pub use num_complex::Complex;
pub use error::{Error, Result};
