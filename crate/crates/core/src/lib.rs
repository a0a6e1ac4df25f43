//! Core engine for two-stage, training-free layout guidance.
//!
//! Everything in this crate is pure computation over heap-allocated grids:
//! a minimal reverse-mode tape over dense 2D fields, a toy differentiable
//! cross-attention model, the aggregation/separation guidance losses, the
//! staged denoising loop, IoU-based layout partitioning, and the
//! layout-correctness metrics. File formats and the CLI live in the `tolo`
//! companion crate.
//!
//! The crate is `no_std` (with `alloc`); all float transcendentals go
//! through `libm` so results are bit-identical across platforms.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod attention;
pub mod gradcheck;
pub mod grid;
pub mod layout;
pub mod losses;
pub mod metrics;
pub mod rng;
pub mod schedule;

pub use grid::{Grid2D, GridError, Tape};

/// Side length of the unified map resolution all per-layer attention maps
/// are upsampled to before aggregation.
pub const MAP_SIZE: usize = 64;

/// Pixel canvas the layout bounding boxes live on.
pub const CANVAS_SIZE: f64 = 512.0;
