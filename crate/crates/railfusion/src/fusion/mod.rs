//! Sliding-window factor-graph estimation: problem assembly, solving,
//! marginalization and the keyframe pipeline.

pub mod factors;
pub mod graph;
pub mod marginalization;

pub use graph::{Factor, FactorEval, FactorGraph, SolveError, SolveReport, SolverConfig, VarKey, Variable};
pub use marginalization::{marginalize, PriorDensity, PriorFactor};
