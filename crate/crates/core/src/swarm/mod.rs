//! Discrete-event simulation of a BitTorrent swarm.

pub mod bitfield;
pub mod choke;
mod engine;
pub mod piece;
pub mod pm;
pub mod rates;

pub use engine::{run, run_with, RunOptions, RunOutput, StallDiagnostic, SwarmError};
