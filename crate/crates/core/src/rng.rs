//! Named random substreams.
//!
//! Every source of randomness hangs off a single 64-bit seed through a
//! labelled substream, so adding a new consumer never perturbs existing ones.

use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};

/// Derive a deterministic generator for `(seed, label)`.
pub fn substream(seed: u64, label: &str) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(label.as_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    ChaCha12Rng::from_seed(key)
}

/// Fold an index into a label, for per-item streams ("query-17", "batch-3").
pub fn indexed(seed: u64, label: &str, index: usize) -> ChaCha12Rng {
    substream(seed, &format!("{label}-{index}"))
}

/// Collapse `(seed, label)` to a fresh 64-bit seed, for handing to APIs that
/// take a seed rather than a generator.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([1u8]);
    hasher.update(label.as_bytes());
    let out: [u8; 32] = hasher.finalize().into();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}
