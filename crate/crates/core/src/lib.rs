//! Bad-sequence detection for correlated sensor time series.
//!
//! The pipeline learns, from anomaly-free data only, a transform that maps
//! windows of correlated measurements to approximately i.i.d. uniform
//! components (linear whitening, an adversarially trained generator, and a
//! per-component empirical-CDF step), then applies occupancy-statistic
//! uniformity tests with exact or Monte-Carlo-calibrated thresholds.
//!
//! The crate also ships a linearized grid measurement simulator with natural
//! and adversarial corruption injectors, the classical weighted-least-squares
//! residual detector, a one-class SVM benchmark, and an ROC evaluation
//! harness, so detectors can be compared on identical test blocks.

pub mod bundle;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gan;
pub mod gridsim;
pub mod linalg;
pub mod nn;
pub mod occupancy;
pub mod ocsvm;
pub mod preprocess;
pub mod seed;
pub mod series;

pub use error::{Error, Result};
