//! Distributed containment control of second-order multi-agent systems over
//! intermittent, asynchronous, delayed and lossy discrete-time links.
//!
//! The crate is organised bottom-up:
//!
//! - [`topology`]: directed interconnection graphs, Laplacian blocks,
//!   containment weights and the small-gain certificate.
//! - [`comm`]: per-edge sampled transmission schedules, blackout-bound
//!   checks and sequence-numbered mailboxes.
//! - [`dynamics`]: agent models, leader trajectories, the oscillator flow.
//! - [`control`]: follower control laws and their auxiliary systems.
//! - [`analysis`]: the generic filter cascade and numerical ISS estimates.
//! - [`sim`]: the fixed-step closed-loop engine and containment metrics.
//! - [`cli`]: scenario configuration files and the command implementations.

pub mod analysis;
pub mod cli;
pub mod comm;
pub mod control;
pub mod dynamics;
mod linalg;
pub mod sim;
pub mod topology;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Topology(#[from] topology::TopologyError),
    #[error(transparent)]
    Comm(#[from] comm::CommError),
    #[error(transparent)]
    Dynamics(#[from] dynamics::DynamicsError),
    #[error(transparent)]
    Control(#[from] control::ControlError),
    #[error(transparent)]
    Sim(#[from] sim::SimError),
    #[error(transparent)]
    Analysis(#[from] analysis::AnalysisError),
    #[error(transparent)]
    Config(#[from] cli::ConfigError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
