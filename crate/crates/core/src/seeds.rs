//! Deterministic seed derivation for parallel ensembles.
//!
//! Sweeps fan out over (parameter, realization) pairs that may run on any
//! thread in any order; each task must get a seed that depends only on the
//! master seed and the task's identity, never on scheduling. Hashing
//! (master, scope, index) gives independent, collision-free streams without
//! any shared RNG state.

use sha2::{Digest, Sha256};

/// Derive a child seed from a master seed, a scope label, and an index.
/// Stable across platforms and releases: the result is the first 8 bytes of
/// SHA-256 over the little-endian master, the scope bytes, and the
/// little-endian index.
pub fn derive_seed(master: u64, scope: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(scope.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest is 32 bytes"))
}
