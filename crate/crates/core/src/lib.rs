//! Merge-and-split training for simultaneous federated learning tasks.
//!
//! Several FL tasks that share a backbone are first merged into one
//! shared-trunk, multi-head model and trained with FedAvg. While that
//! all-in-one model trains, clients measure how a trunk update along one
//! task's gradient changes every other task's loss. The server averages
//! these affinities, picks the grouping of tasks into `x` disjoint splits
//! with the highest total affinity, and keeps training each split from the
//! all-in-one parameters.
//!
//! The crate is organised bottom-up:
//!
//! - [`nn`]: dense layers, losses, reverse-mode gradients, SGD.
//! - [`model`]: the shared-trunk multi-head model and its merge/split lifecycle.
//! - [`affinity`]: lookahead affinities and their client/server averaging.
//! - [`partition`]: exhaustive enumeration and scoring of task groupings.
//! - [`datagen`]: synthetic multi-task suites with a known clustering.
//! - [`sim`]: the federated simulator, baselines, evaluation and cost model.

pub mod affinity;
pub mod datagen;
pub mod error;
pub mod model;
pub mod nn;
pub mod partition;
pub mod rng;
pub mod sim;
pub mod task;

pub use error::{Error, Result};
pub use task::{LossKind, TaskId, TaskSpec};
