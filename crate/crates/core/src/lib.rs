//! Concept-tree analysis for transformer language models.
//!
//! The crate traces counterfactual input edits through the spectrum of each
//! layer's value projection. For every counterfactual pair it finds the
//! layer where the two inputs' last-token representations separate, and it
//! assembles those layers into a chain-shaped concept tree.
//!
//! Modules, bottom-up:
//!
//! - [`linalg`]: dense matrices, thin SVD, cosine, top-k masking, L2.
//! - [`capture`]: the on-disk activation bundle (`MCT1`) shared with model exporters.
//! - [`toymodel`]: a seeded decoder-only transformer that emits bundles.
//! - [`concept`]: concept paths, separation scores and branching layers.
//! - [`tree`]: concept-tree assembly plus JSON and DOT output.
//! - [`analysis`]: layer-wise propagation curves and correlation statistics.
//! - [`pipeline`]: LLM-driven concept discovery wired to the analysis.

pub mod analysis;
pub mod capture;
pub mod concept;
pub mod error;
pub mod linalg;
pub mod pipeline;
pub mod toymodel;
pub mod tree;

pub use error::{Error, Result};
