//! Deterministic discrete-event simulator for semi-asynchronous federated
//! learning.
//!
//! The server buffers client updates and aggregates with adaptive weights
//! that combine a staleness discount with each update's cosine importance to
//! the current global model (the `seafl` policy). A partial-training variant
//! (`seafl2`) notifies over-stale clients to upload after their current epoch
//! instead of blocking the round. Synchronous (`fedavg`), fully asynchronous
//! (`fedasync`), and uniform-buffer (`fedbuff`) baselines share the same
//! engine, so wall-clock-to-accuracy comparisons are apples to apples.
//!
//! Everything is driven by a virtual clock: device speeds are heavy-tailed
//! idle-delay models, runs are reproducible bit-for-bit from a single seed,
//! and metrics are emitted as CSV/JSON.

pub mod aggregator;
pub mod config;
pub mod data;
pub mod device;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;

pub use config::{PolicyKind, RunConfig};
pub use engine::run;
pub use error::{Result, SimError};
pub use metrics::MetricsLog;
pub use params::ParamVector;
