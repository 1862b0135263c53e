//! Deterministic emulation toolkit for large-scale LLM training runs.
//!
//! The pipeline mirrors a two-phase workflow: first a coordinator collects
//! a bare execution graph by multiplexing all logical ranks over a few
//! execution slots, then slice-by-slice timing fill and inter-slice
//! calibration produce a globally consistent schedule, which a hybrid
//! replayer emulates with pruned collectives so a small sandbox observes
//! full-scale behavior.

pub mod calibrate;
pub mod collective;
pub mod config;
pub mod coordinator;
pub mod format;
pub mod graph;
pub mod moe;
pub mod replay;
pub(crate) mod schedule;
pub mod workload;

pub use graph::{ExecutionGraph, GroupId, NodeId, Ns, RankId, SyncGroupId};
