//! Long-term token-memory tracking of a single object through LiDAR-style
//! point cloud sequences.
//!
//! The crate bundles everything needed to run the tracker end to end on a
//! desk machine with zero external data:
//!
//! - [`autodiff`] — tape-based reverse-mode differentiation over dense
//!   matrices, with a finite-difference verification harness.
//! - [`geom`] — oriented 3D box algebra: canonical transforms, rotated IoU,
//!   point-in-box masks, and cross-frame point correspondences.
//! - [`perception`] — an edge-convolution point encoder with farthest-point
//!   downsampling, plus a voting decode head.
//! - [`memory`] — the K×D foreground token memory and the single-frame
//!   background memory: initialization, feature refinement, recurrent update.
//! - [`objectives`] — temporal consistency, memory cycle consistency, and
//!   decoder losses.
//! - [`tracker`] — stateful per-sequence inference with low-confidence
//!   stabilization.
//! - [`synth`] — a deterministic synthetic sequence generator and the
//!   line-oriented sequence file format.
//! - [`training`] — window sampling, Adam, and checkpoint persistence.
//! - [`eval`] — OPE Success/Precision, length-stratified reports, feature
//!   consistency profiling, and memory footprint accounting.
//!
//! Each major capability has a runnable example under `examples/`; the
//! `memtrack` binary exposes the same functionality as subcommands.

pub mod autodiff;
pub mod config;
pub mod geom;
pub mod memory;
pub mod perception;
pub mod synth;
