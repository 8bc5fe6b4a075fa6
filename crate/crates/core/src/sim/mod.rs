//! Federated simulation of merge-and-split training and its baselines.
//!
//! A run is a sequence of phases. Every phase is a loop of rounds: select
//! `K` clients, train each locally from the current global model, average
//! the results weighted by client dataset size. During the all-in-one phase
//! of a merge-and-split run, clients also report averaged lookahead
//! affinities, which the server averages per round.
//!
//! All randomness is keyed by `(seed, phase, round, client)`, so running
//! clients in parallel does not change any result.

mod client;
mod config;
mod cost;
mod eval;
mod pipeline;
mod report;
mod server;

pub use crate::datagen::ClientDataset;
pub use client::{client_execution, ClientUpdate, LocalTraining};
pub use config::{ExperimentConfig, Method, TrunkConfig};
pub use cost::{
    cost_model, CostParams, CostReport, Job, RoundTrace, StageCost, StageTrace, TrainingTrace,
};
pub use eval::{evaluate, evaluate_per_client};
pub use pipeline::{
    prepare_data, run, run_baseline, run_mas, run_mas_detailed, MasRun, PreparedData,
};
pub use report::{
    ClientLossSummary, ExperimentReport, PartitionReport, Phase, RoundRecord, TaskRunReport,
};
pub use server::{
    fedavg_aggregate, phase_key, select_clients, selection_stream, shuffle_stream, PhaseKey,
};
