//! Data cube materialization and maintenance on a single-machine
//! map/merge/reduce/refresh engine.
//!
//! The library materializes complete or partial data cubes in one pass by
//! batching cuboids that share a key prefix, balances reducer allocation
//! from a profiling run, and maintains the views under append-only deltas
//! either by recomputation against cached sorted runs or by incrementally
//! refreshing cached views. Per-reducer state lives in persistent local
//! stores with lazy checkpointing for recovery.
//!
//! Modules follow the pipeline: [`lattice`] and [`planner`] shape the work,
//! [`balancer`] sizes it, [`engine`] runs it, [`cubing`] and [`maintenance`]
//! supply the job logic, [`localstore`] persists reducer state, [`dataio`]
//! handles datasets, and [`oracle`] provides an independent ground truth
//! for verification.

pub mod balancer;
pub mod cubing;
pub mod dataio;
pub mod engine;
pub mod error;
pub mod lattice;
pub mod localstore;
pub mod oracle;
pub mod planner;

pub use error::{Error, Result};
