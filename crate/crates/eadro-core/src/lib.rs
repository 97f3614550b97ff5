//! End-to-end troubleshooting for microservice telemetry.
//!
//! The pipeline turns raw traces, logs and KPIs into windowed samples,
//! trains a joint anomaly detector + root-cause localizer over a service
//! dependency graph, and reports detection/localization metrics. A
//! deterministic fault-injecting simulator generates the telemetry so the
//! whole loop is verifiable on a laptop.
//!
//! Crate layout follows the pipeline stages:
//!
//! - [`simulator`] — topology generation, request walks, fault injection
//! - [`telemetry`] — domain types, windowing, dependency graph, dataset files
//! - [`logparse`] — fixed-depth parse-tree template mining
//! - [`hawkes`] — self-exciting intensity features over log events
//! - [`tensorcore`] — tensors, reverse-mode autodiff, checkpoints
//! - [`model`] — encoders, fusion, graph attention, detection/localization
//! - [`train`] — splits, Adam, the training loop
//! - [`evaluate`] — metrics, the N-sigma baseline, end-to-end reports
//! - [`pipeline`] — featurize/train/evaluate/troubleshoot orchestration
//!
//! Built with the default `parallel` feature the data-parallel stages fan
//! out over rayon; `--no-default-features` selects the sequential fallback
//! with byte-identical outputs.

pub mod error;
pub mod evaluate;
pub mod hawkes;
pub mod logparse;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod simulator;
pub mod telemetry;
pub mod tensorcore;
pub mod train;

pub use error::{Error, Result};
