//! Model-agnostic local explanations for multimodal black-box predictors.
//!
//! The engine treats a predictor as a black box reachable only through binary
//! masks over interpretable units (superpixels, tokens, table fields, ...).
//! Units are grouped by modality. Around one instance it:
//!
//! 1. samples masked perturbations and queries the black box ([`neighborhood`]),
//! 2. weights each perturbation by a modality-aware locality kernel,
//! 3. fits one weighted sparse group lasso surrogate over all units ([`sgl`]),
//! 4. reads off unit- and modality-level attributions ([`attribution`]),
//! 5. scores the result with faithfulness / compactness / stability / cost and
//!    evidence-alignment metrics ([`metrics`]).
//!
//! The black box stays external: endpoints receive masks and reply with raw
//! output vectors over a small wire protocol ([`blackbox`]), so the engine
//! never touches pixels or tokens and every forward call is counted.

pub mod alpha;
pub mod attribution;
pub mod blackbox;
pub mod metrics;
pub mod neighborhood;
pub mod pipeline;
pub mod raster;
pub mod sgl;
pub mod space;

mod stats;

pub use space::{InstanceSpec, MaskVector};
