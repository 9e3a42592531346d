//! Wide-area material monitoring.
//!
//! A material network ([`tmn`]) is watched by material measurement units
//! placed in some of its compartments. Each unit reports the object classes it
//! detects; the concentrator aligns those reports by epoch and turns them into
//! synchronized material masses ([`synchro`]). [`scenario`] simulates ground
//! truth and detection streams, [`wire`] is the agent/concentrator protocol.

pub mod agent;
pub mod cli;
pub mod concentrator;
pub mod output;
pub mod scenario;
pub mod synchro;
pub mod tmn;
pub mod wire;

use thiserror::Error;

pub use synchro::{ClassId, CompositionRegistry, Counts, DetectionReport, MaterialId, SynchroSnapshot, UnitStatus};
pub use tmn::{CompartmentId, TmnNetwork};

/// Errors from loading and validating input documents.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Network(#[from] tmn::NetworkError),
    #[error(transparent)]
    Registry(#[from] synchro::RegistryError),
    #[error(transparent)]
    Scenario(#[from] scenario::ScenarioError),
    #[error(transparent)]
    Synchro(#[from] synchro::SynchroError),
}
