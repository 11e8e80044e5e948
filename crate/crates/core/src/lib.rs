//! Dual-strategy test-time adaptation laboratory.
//!
//! Test batches are scored by the current model, then each sample is
//! probed with a content-destroying patch shuffle and a style-only feature
//! statistics perturbation. Samples whose prediction collapses under the
//! shuffle but survives the restyle are treated as likely correct and
//! their entropy is minimized; the opposite profile marks likely-incorrect
//! samples whose entropy is maximized.

pub mod error;
pub mod data;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod ndgrad;
pub mod stats;
pub mod theory;
pub mod transforms;
pub mod tta;

pub use error::{Error, Result};
pub use ndgrad::{NodeId, RngStream, Tape, Tensor};
