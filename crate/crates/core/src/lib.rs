//! Deterministic federated-learning simulator for multi-hospital tabular
//! EHR cohorts.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`]: record schema, CSV ingestion, synthetic non-IID generator,
//!   per-hospital partitioning, train/test splitting and standardization.
//! - [`scenarios`]: hospital cohorts bounded by shard size.
//! - [`model`]: a small MLP classifier with explicit backpropagation and Adam.
//! - [`metrics`]: rank-based ROC-AUC and evaluation reports.
//! - [`fedavg`]: client sampling, local training, aggregation and the server loop.
//! - [`executor`]: the parallel, retrying map/reduce engine used for one round.
//! - [`sweep`]: grids of experiments over local epochs, participation fraction
//!   and batch size, with a JSON-lines result store and CSV reports.

pub mod data;
pub mod executor;
pub mod fedavg;
pub mod metrics;
pub mod model;
pub mod scenarios;
pub mod seed;
pub mod sweep;

pub use data::{ClientShard, Dataset, Record, SyntheticSpec};
pub use executor::{Executor, RetryPolicy};
pub use fedavg::{ExperimentResult, FedConfig, Weighting};
pub use metrics::EvalReport;
pub use model::{AdamState, MlpParams};
pub use scenarios::{Cohort, ScenarioSpec};
pub use sweep::{InitPolicy, SweepGrid, SweepRecord};
