//! Physics-aware reward scoring and density-reweighted preference
//! optimisation for generated videos.
//!
//! The crate covers the data side of the pipeline: subject-consistency and
//! mechanics scoring ([`score`], [`mechanics`]), win/lose pair curation
//! ([`curation`]), histogram reweighting and weighted DPO on a toy policy
//! ([`phydpo`]), the on-disk artifact formats ([`io`]) and the command-line
//! pipeline ([`pipeline`]). Neural inference is out of scope: embeddings and
//! verdicts are ingested from files or a verdict endpoint.

// `!(x >= lo)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod curation;
pub mod error;
pub mod fixtures;
pub mod io;
pub mod mechanics;
pub mod phydpo;
pub mod pipeline;
pub mod score;

pub use error::{Error, Result};
