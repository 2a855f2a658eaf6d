//! Pool-based active learning on simulated edge devices, with a fog node
//! that merges the device models by parameter averaging or by picking the
//! best one on a validation slice.
//!
//! Devices run an MC-dropout LeNet ([`bayes`]) and pick which images to label
//! with entropy, BALD or variation-ratio scores ([`acquisition`]). The
//! [`edge`] module simulates devices, data partitioning and cascaded
//! training chains; [`federation`] holds the fog-node logic.

pub mod acquisition;
pub mod bayes;
pub mod config;
pub mod dataset;
pub mod edge;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod suite;

pub use error::{Error, Result};
