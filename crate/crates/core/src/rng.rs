//! Deterministic derivation of independent RNG streams.
//!
//! Every random decision in the pipeline draws from a stream keyed by
//! `(global_seed, slice_id, purpose, index)`, so results do not depend on
//! worker count or scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Stream for one derived purpose. The key components are length-prefixed so
/// distinct tuples never hash identically.
pub fn derive(seed: u64, slice_id: &str, purpose: &str, index: u64) -> StreamRng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for part in [slice_id.as_bytes(), purpose.as_bytes()] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    h.update(index.to_le_bytes());
    StreamRng::from_seed(h.finalize().into())
}

/// Stream for a single-seed operation called outside the pipeline.
pub fn from_seed(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}

/// Per-patch stream: `hash(global_seed, slice_id, patch_index)`.
pub fn patch_stream(seed: u64, slice_id: &str, patch_index: u64) -> StreamRng {
    derive(seed, slice_id, "patch", patch_index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a = patch_stream(7, "s1", 0).next_u64();
        assert_eq!(a, patch_stream(7, "s1", 0).next_u64());
        assert_ne!(a, patch_stream(7, "s1", 1).next_u64());
        assert_ne!(a, patch_stream(7, "s2", 0).next_u64());
        assert_ne!(a, patch_stream(8, "s1", 0).next_u64());
        assert_ne!(derive(1, "ab", "c", 0).next_u64(), derive(1, "a", "bc", 0).next_u64());
    }
}
