//! Multi-scale organ segmentation building blocks: a feature pyramid with
//! spatial-recurrent context fusion, detection and mask heads with their
//! training losses, and Dice evaluation over color-coded label masks.
//!
//! Everything runs on the CPU with hand-written forward and backward
//! kernels; see [`tape`] for the differentiation machinery and
//! [`gradcheck`] for how it is verified.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod detect;
pub mod eval;
pub mod error;
pub mod fpn;
pub mod gradcheck;
pub mod irnn;
pub mod kernels;
pub mod model;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor4};
