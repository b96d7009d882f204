//! Lung-nodule malignancy pipeline.
//!
//! The crate covers every stage from raw CT volumes and reader annotations
//! to evaluation reports:
//!
//! * [`ingest`] reads RAWCT volumes and annotation XML.
//! * [`consensus`] merges reader outlines into consensus nodules and cohorts.
//! * [`patchset`] extracts normalized CNN input patches and stores them as NDX1.
//! * [`qif`] computes the 50 quantitative image features.
//! * [`nn`] holds the CNN21/CNN47 networks, written from scratch.
//! * [`classifiers`] has the random forest and the size-only logistic baseline.
//! * [`eval`] computes ROC/AUC metrics and runs the experiment designs.
//! * [`phantom`] generates synthetic CT studies with separable nodule classes.
//! * [`cli`] wires all of the above into the `nodx` command.

pub mod classifiers;
pub mod cli;
pub mod consensus;
mod container;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod nn;
pub mod patchset;
pub mod phantom;
pub mod qif;
pub mod seed;

pub use error::{Error, Result};

/// Round half away from zero, as used for ratings and patch centers.
pub fn round_half_away(x: f64) -> f64 {
    // f64::round already rounds half away from zero.
    x.round()
}
