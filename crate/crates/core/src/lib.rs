//! Self-supervised synthesis of intermediate CT slices.
//!
//! A CT volume scanned with coarse slice spacing is sharp within each axial
//! slice but blocky when resliced along the body axis. This crate trains a
//! pair of networks to fill in the missing slices **without ever seeing
//! ground-truth intermediate slices**: a slice-wise interpolator works on
//! the axial view, a pixel-wise interpolator works on the coronal and
//! sagittal views, and the two supervise each other through a mutual
//! distillation loss restricted to the voxels where they already agree.
//!
//! The crates are organised bottom-up:
//!
//! * [`volume`] — voxel grids, view decomposition, degradation, fusion,
//!   phantom generation and `.cvol` file I/O;
//! * [`transforms`] — space/depth reshuffles and the Haar wavelet pyramid;
//! * [`autodiff`] — a small reverse-mode tape over dense tensors, generic
//!   over `f32`/`f64`, with a finite-difference checker;
//! * [`memory`] — the external memory bank with attention read and
//!   nearest-item write;
//! * [`networks`] — the two interpolator architectures and checkpoints;
//! * [`losses`] — reconstruction, wavelet, consistency and memory terms;
//! * [`training`] — batching, Adam, the two-stage loop, logging;
//! * [`metrics`] — PSNR/SSIM, reference interpolators, evaluation reports.

pub mod autodiff;
pub mod error;
pub mod losses;
pub mod memory;
pub mod metrics;
pub mod networks;
pub mod selfcheck;
pub mod training;
pub mod transforms;
pub mod volume;

pub use error::{Error, Result};
