//! Exogenous-window whitening (TWS) and a channel-independent patch
//! transformer that bridges endogenous and exogenous tokens through a
//! learnable global token.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense `f64` arrays and a reverse-mode gradient tape.
//! * [`spectral`]: covariance and a cyclic Jacobi eigensolver.
//! * [`tws`]: the globally fitted whitener applied per exogenous window.
//! * [`data`]: CSV loading, chronological splits, windows and instance norm.
//! * [`model`]: the forecaster (patching, embeddings, encoder blocks, head).
//! * [`train`]: MSE loss, Adam, early-stopped training and checkpoints.
//! * [`eval`]: metrics, the bridging/TWS ablation grid and reports.

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod spectral;
pub mod tensor;
pub mod train;
pub mod tws;

pub use error::{Error, Result};
pub use tensor::{DenseArray, Tape, Var};
