//! Tracker locality policy, swarm simulator and inter-AS traffic estimation.

pub mod estimator;
pub mod ids;
pub mod ingest;
pub mod num;
pub mod rng;
pub mod scenario;
pub mod metrics;
pub mod swarm;
pub mod tracker;

pub use ids::{IspId, PeerId};
pub use num::Scalar;
pub use scenario::{PeerSpec, ScenarioConfig};

/// Exact scalar for identities and cumulative sums.
pub type Exact = num_rational::BigRational;
/// Scalar used for reporting.
pub type Real = f64;
