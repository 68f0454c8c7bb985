//! Desk-scale simulator of federated training for multi-camera identity
//! retrieval.
//!
//! Clients share a backbone and keep private identity classifiers; a server
//! aggregates the shared part round by round (partial averaging), optionally
//! reweighting uploads by cosine distance, grouping clients by first-neighbor
//! clustering, or distilling client knowledge into the global model through a
//! shared dataset. Worlds are synthetic multi-camera identity datasets with
//! controllable non-IID shift and volume skew, and models are evaluated with
//! retrieval metrics (CMC rank-k, mAP) plus communication-cost accounting.

pub mod datagen;
pub mod error;
pub mod fedsim;
pub mod metrics;
pub mod model;
pub mod numcore;

pub use error::{Error, Result};
