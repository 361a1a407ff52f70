//! Siamese motion-aware visual tracking.
//!
//! A siamese feature extractor feeds three parallel branches: anchor
//! classification, anchor box regression, and a center-localization heatmap
//! refined by a global context block and an atrous pyramid. Per-level maps of
//! each branch are fused with weights from a learnable multi-scale attention
//! module. Everything runs on the small autograd kernel in [`numerics`].

pub mod anchors;
pub mod attention;
pub mod backbone;
mod error;
pub mod evaluation;
pub mod gradsuite;
pub mod heads;
pub mod image;
pub mod inference;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod params;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
