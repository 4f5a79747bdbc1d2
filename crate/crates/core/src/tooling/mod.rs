//! Gradient checks, cost model, map export and the property suite.

pub mod flops;
pub mod gradcheck;
pub mod heatmap;
pub mod invariants;
