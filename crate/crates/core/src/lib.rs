//! Spatio-temporal sample-tile optimization for Monte Carlo animation rendering.
//!
//! The crate optimizes a toroidal `(X, Y, T)` tile of per-pixel sample sets so
//! that rendering error, once filtered by a spatial point-spread kernel, a
//! temporal perception kernel and an optional TAA exponential moving average,
//! lands in high spatio-temporal frequencies. Gradients come from sliced 1D
//! optimal transport over kernel-thresholded sample subsets; updates use Adam.
//!
//! Modules:
//! - [`kernels`]: kernel construction, composition and sequence convolution.
//! - [`tile`]: the sample tile and its binary file format.
//! - [`swgd`]: the sliced-Wasserstein gradient-descent optimizer.
//! - [`percept`]: TAA, perceptual error, pRelMSE and spectral analysis.
//! - [`synth`]: analytic test scenes, a tile renderer and an a posteriori
//!   candidate-selection optimizer.
//! - [`io`]: PFM, PNG and CSV helpers.

pub mod error;
pub mod io;
pub mod kernels;
pub mod percept;
pub mod rng;
pub mod sequence;
pub mod swgd;
pub mod synth;
pub mod tile;

pub use error::{Error, Result};
pub use kernels::{
    convolve_sequence, ApplicationPolicy, PerceptSource, SpatialKernel, SpatioTemporalKernel,
    TaaKernel, TemporalPerceptKernel, TemporalSupport,
};
pub use sequence::{ErrorSequence, FrameSequence};
pub use tile::{CellIndex, SampleTile};
