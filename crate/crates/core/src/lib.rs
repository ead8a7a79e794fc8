//! Surrogate modelling of capacity-reduction policies on road networks.
//!
//! The crate contains everything needed to run the experiment end to end:
//!
//! - [`network`]: synthetic grid cities with districts, JSON persistence.
//! - [`scenario`]: district sampling, capacity-reduction policies, dataset splits.
//! - [`assign`]: the ground-truth oracle (BPR + method of successive averages).
//! - [`dual`]: line-graph conversion and per-segment feature matrices.
//! - [`autodiff`]: a small tape-based reverse-mode engine with graph primitives and Adam.
//! - [`gnn`]: the PointNet / Transformer / GAT surrogate, MSE loss and training loop.
//! - [`eval`]: R², naive MSE and the per-road-class report.
//! - [`export`]: GeoJSON export of per-segment volume changes.
//! - [`pipeline`]: in-memory orchestration of the stages above.

pub mod assign;
pub mod autodiff;
pub mod dual;
pub mod error;
pub mod eval;
pub mod export;
pub mod gnn;
pub mod io;
pub mod network;
pub mod pipeline;
pub mod scenario;

pub use error::{Error, Result};
