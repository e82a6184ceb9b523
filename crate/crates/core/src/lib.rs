//! Person re-identification with self-thresholding attention-guided feature
//! dropping, channel/spatial attention and batch-hard triplet training.
//!
//! The crate is organised bottom-up: [`tensor`] provides the differentiable
//! substrate, [`attention`], [`adadrop`] and [`loss`] build on it, [`net`]
//! assembles the three-branch model, [`eval`] scores retrieval, and
//! [`harness`] covers configuration, data, persistence and the training loop.

pub mod adadrop;
pub mod attention;
pub mod error;
pub mod eval;
pub mod harness;
pub mod loss;
pub mod net;
pub mod tensor;

pub use error::{CheckpointError, Error, Result};
