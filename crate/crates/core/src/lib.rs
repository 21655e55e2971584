//! Compositional-generalization toolkit for human-object interaction (HOI)
//! detection at desk scale.
//!
//! The crate covers evaluation (per-composition AP, subset mAP and mean
//! performance degradation), three verb-classification streams with
//! aleatoric-uncertainty heads, the object-category-immune feature
//! synthesizer protocol, uncertainty-guided pseudo-labeling, calibrated
//! multi-stream fusion, a synthetic benchmark generator and the experiment
//! pipeline that wires them together.

pub mod bench;
pub mod calibration;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ocimmune;
pub mod pipeline;
pub mod stream;
pub mod ugt;

pub use error::{Error, Result};
