//! Deterministic seed derivation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Hashes length-prefixed parts into 32 bytes.
fn hash_parts(parts: &[&[u8]]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    hasher.finalize().into()
}

/// Seed for the `candidate`-th backend call of step `step` in a run seeded
/// with `run_seed`. Single-call actions use candidate 0.
pub fn step_seed(run_seed: u64, step: usize, candidate: usize) -> u64 {
    let digest = hash_parts(&[
        b"step-seed",
        &run_seed.to_le_bytes(),
        &(step as u64).to_le_bytes(),
        &(candidate as u64).to_le_bytes(),
    ]);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// A ChaCha stream keyed by arbitrary labelled inputs.
pub fn rng_from(parts: &[&[u8]]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(hash_parts(parts))
}
