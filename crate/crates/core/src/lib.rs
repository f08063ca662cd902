//! Spike-camera stream processing.
//!
//! A spike camera polls an H×W array of integrate-and-fire pixels at a fixed
//! interval (25 µs on current hardware, i.e. 40 kHz) and emits one binary
//! frame per poll. This crate provides the pieces needed to work with those
//! streams end to end:
//!
//! - [`stream`]: the bit-packed H×W×T spike cube and windowed statistics
//! - [`codec`]: the `.dat` frame format and its `.info` sidecar metadata
//! - [`simulator`]: integrate-and-fire spike generation from intensity frames
//! - [`recon`]: statistics-based image reconstruction (rate and interval)
//! - [`pipeline`]: the real-time block/assemble/dispatch acquisition pipeline
//! - [`metrics`]: PSNR/SSIM and pipeline throughput reports
//! - [`dataset`]: directory-backed dataset descriptors and sample loading
//!
//! Compute kernels are data-parallel over pixels and run on rayon when the
//! `parallel` feature (default) is enabled; disabling it swaps in sequential
//! loops with identical results.

pub mod codec;
pub mod dataset;
pub mod error;
pub mod imageio;
pub mod metrics;
mod par;
pub mod pipeline;
pub mod recon;
pub mod simulator;
pub mod stream;

pub use error::{Result, SpikeError};
pub use par::set_thread_cap;
pub use stream::{SpikeStream, StreamGeometry};
