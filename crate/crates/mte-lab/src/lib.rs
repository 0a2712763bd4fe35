//! Desk-scale laboratory for training calibrated classifiers with a
//! co-trained auxiliary model (mutual-transport ensemble), alongside
//! classic baselines, plus a full calibration and detection evaluation
//! suite on synthetic data.
//!
//! The crate is organized as:
//!
//! - [`autodiff`]: minimal reverse-mode AD tape with a stop-gradient node
//! - [`nn`]: small MLP classifiers, SGD with momentum, checkpoints
//! - [`losses`]: cross-entropy, KL, MTE / DML objectives, baselines
//! - [`trainer`]: co-training and baseline training loops, prediction
//! - [`metrics`]: ECE, classwise-ECE, reliability diagrams, detection
//! - [`data`]: synthetic mixtures, corruption sweeps, OOD splits, CSV I/O
//! - [`experiment`]: config-driven end-to-end runs and report files

pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
