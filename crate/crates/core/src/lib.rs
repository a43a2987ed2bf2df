//! Desk-scale SAR object detection with direction-aware attention and a
//! global-fusion neck.
//!
//! The crate is self-contained: a small reverse-mode autodiff tensor kernel
//! (`tensor`), the direction-aware attention module (`dam`), the backbone and
//! unity-compensation neck (`backbone`, `neck`), an anchor-free detection
//! head with its losses (`head`), evaluation metrics (`metrics`), file
//! formats and synthetic scene generation (`data`), model assembly
//! (`config`, `model`), and SGD training with checkpoints (`train`). The
//! `gradsuite` module hosts the finite-difference verification suite shared
//! by the CLI and the acceptance tests.

pub mod backbone;
pub mod config;
pub mod dam;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod head;
pub mod metrics;
pub mod model;
pub mod neck;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
