//! Spatiotemporal convolution engine and nowcasting model kit.
//!
//! The crate is organized around a dense 5-axis tensor type
//! ([`tensor::Tensor5`], axes `(N, C, T, H, W)`) and a small tape-based
//! reverse-mode autodiff engine ([`tape::Tape`]) whose only heavy primitive
//! is a direct 3D convolution ([`conv`]). On top of those sit the two
//! architecture blocks (`blocks`: the multi-kernel split-convolution
//! aggregation block and the spatiotemporal refinement block), the full
//! encoder/decoder model assembly (`model`), losses/optimizer/metrics and
//! the training loop (`train`, `metrics`), a deterministic synthetic
//! sequence generator (`data`), and a self-verification suite (`verify`).
//!
//! Everything is deterministic given seeds: parallel kernels only split
//! work over disjoint output slabs with a fixed per-element summation
//! order, so results are bit-identical regardless of thread count.

pub mod blocks;
pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
