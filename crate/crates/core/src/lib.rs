//! Video snapshot compressive imaging with a motion-aware dynamic graph
//! enhancer: measurement simulation, a GAP-TV baseline, optical flow,
//! graph construction and aggregation, networks, training and evaluation.

pub mod aggregation;
pub mod error;
pub mod eval;
pub mod graph;
pub mod kv;
pub mod metrics;
pub mod motion;
pub mod networks;
pub mod scenes;
pub mod sci;
pub mod training;

pub use error::{Error, Result};
pub use mady_tensor as tensor;
