//! Desk-scale laboratory for targeted backdoor data-poisoning attacks on
//! image classifiers.
//!
//! The crate generates poisoning samples and backdoor instances with four
//! injection strategies (input-instance key, blended, accessory, blended
//! accessory), trains small deterministic classifiers on the poisoned data,
//! measures attack success rate / standard test accuracy / wrong-key rate,
//! and evaluates three candidate defenses (label-distribution audit, L2
//! outlier pruning, auxiliary-pristine-data fine-tuning).

pub mod datasets;
pub mod defenses;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod imaging;
pub mod keys;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
