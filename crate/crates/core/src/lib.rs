//! Patch-based sample construction for spatial transcriptomics.
//!
//! A slice (spots with 2-D coordinates and expression vectors) is rank-compacted
//! onto a tight lattice, cropped into fixed `h x w` windows, and reduced to `m`
//! gene channels by variance-weighted sampling. The resulting patches are
//! written to deterministic binary shards alongside a JSON manifest.
//!
//! The crate also carries the baseline spot-level dataset, reference
//! implementations of the masked-reconstruction objectives, and the kNN
//! domain-detection evaluation protocol.

pub mod compact;
pub mod crop;
pub mod error;
pub mod eval;
pub mod genesel;
pub mod ingest;
pub mod losses;
pub mod mask;
pub mod matrix;
pub mod pipeline;
pub mod render;
pub mod rng;
pub mod shard;
pub mod stats;
pub mod types;

pub use error::{Error, Result};
pub use types::{CompactGrid, GeneVocabulary, MaskMode, MaskSpec, PatchSample, RawSlice, Spot};

/// Toolkit version recorded in every manifest.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
