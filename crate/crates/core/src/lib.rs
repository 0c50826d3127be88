//! Deterministic desk-scale simulator of federated learning with client-private
//! backbones, a shared adapter, prototype alignment against public-data
//! references, and magnitude-based Top-K dropping of adapter uploads.
//!
//! Modules, bottom-up:
//!
//! - [`model`]: the split network, its losses, exact gradients, and SGD.
//! - [`data`]: synthetic tasks, Dirichlet partitions, the public dataset.
//! - [`apud`]: Top-K masked uploads and element-wise masked aggregation.
//! - [`erpa`]: prototype computation, aggregation, and anchors.
//! - [`orchestrator`]: rounds, experiments, evaluation, ablations.
//! - [`trace`]: the JSON-lines trace format, cost ledgers, and trace checks.

pub mod apud;
pub mod data;
pub mod erpa;
pub mod error;
pub mod model;
pub mod orchestrator;
pub mod seed;
pub mod trace;

pub use error::{Error, Result};
pub use orchestrator::{ExperimentConfig, Federation, Mode};
