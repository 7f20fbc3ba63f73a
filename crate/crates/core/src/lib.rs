//! Episodic-memory neural decision tree (eMem-NDT) for interpretable
//! vehicle behavior prediction.
//!
//! The pipeline has five stages:
//!
//! 1. [`encoder`]: a compact state transformer plus evolving graph
//!    convolution produces an embedding `g` per instance and a softmax
//!    baseline classifier.
//! 2. [`tree`]: behavior descriptions are embedded and clustered
//!    agglomeratively into a binary taxonomy with one leaf per behavior.
//! 3. [`memory`]: training embeddings are filtered into per-leaf episodic
//!    memory banks.
//! 4. [`ndt`]: per-leaf transforms score an input against each bank,
//!    scores propagate up the tree and turn into leaf probabilities on the
//!    way down; every prediction carries an explanation trace.
//! 5. [`eval`]: precision/recall/F1, threshold sweeps and prototype
//!    utilization.

pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod memory;
pub mod ndt;
pub mod tree;

pub mod params;
mod optim;
pub mod parallel;

pub use error::{Error, Result};
