//! Hashing and canonical JSON helpers shared by persistence and RNG stream
//! derivation.

use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Pretty JSON in struct field order with a trailing newline. Loading and
/// re-serializing a document produced here yields identical bytes.
pub fn canonical_json<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

/// Derives a 32-byte seed from a sequence of labelled parts. Each part is
/// length-prefixed so `("ab", "c")` and `("a", "bc")` never collide.
pub fn derive_seed(parts: &[&[u8]]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let out = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&out);
    seed
}

/// Stable 64-bit hash for deterministic simulator choices.
pub fn stable_u64(parts: &[&[u8]]) -> u64 {
    let seed = derive_seed(parts);
    u64::from_le_bytes(seed[..8].try_into().expect("8 bytes"))
}
