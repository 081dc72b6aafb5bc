//! Evaluation toolkit for object-centric representation learning.
//!
//! The crate consumes scenes (images, ground-truth masks, object
//! properties) and the outputs of an upstream model (slot vectors, soft
//! masks, reconstructions) and provides:
//!
//! - [`metrics`]: reconstruction MSE, foreground ARI, segmentation covering.
//! - [`matching`]: slot/object cost matrices and a Hungarian solver.
//! - [`downstream`]: linear and MLP property probes on frozen slots.
//! - [`shifts`]: test-time distribution shifts on scenes.
//! - [`synth`]: a synthetic scene generator and a mock slot encoder.
//! - [`report`]: seed aggregation and rank correlation.

pub mod data;
pub mod downstream;
pub mod error;
pub mod matching;
pub mod metrics;
pub mod report;
pub(crate) mod rng;
pub mod shifts;
pub mod synth;

pub use error::{Error, Result};
