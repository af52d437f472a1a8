//! Instance-wise sequential feature acquisition with optimal stopping.
//!
//! Features are quantized and scored by adjusted mutual information with the
//! class, a dependency graph over the kept features yields an acquisition
//! order, and a finite-horizon stopping problem over class posteriors is
//! solved offline into action-tagged alpha vectors. At test time each
//! instance pays for features one at a time until stopping is cheaper than
//! continuing.
//!
//! - [`dataset`]: loading, quantization, folds
//! - [`infotheory`]: entropy, MI, AMI, CMI, feature filtering
//! - [`structure`]: dependency graphs, ordering, CPTs, stage tables
//! - [`belief`]: posteriors and costs
//! - [`policy`]: belief banks, backups, brute-force oracle
//! - [`runtime`]: per-instance inference
//! - [`harness`]: training pipeline, evaluation, sweeps, persistence, CLI

pub mod belief;
pub mod dataset;
pub mod harness;
pub mod infotheory;
pub mod policy;
pub mod runtime;
pub mod structure;
