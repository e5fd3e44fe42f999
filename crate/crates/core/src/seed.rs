//! Seed derivation so every stochastic component draws from its own stream.

use sha2::{Digest, Sha256};

/// Derives a child seed from a base seed and a label. Stable across runs and
/// platforms; changing either input changes the stream.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Hash of raw f64 data, used for snapshot/determinism checks.
pub fn hash_f64s<'a>(parts: impl IntoIterator<Item = &'a [f64]>) -> String {
    let mut h = Sha256::new();
    for part in parts {
        for v in part {
            h.update(v.to_le_bytes());
        }
    }
    hex_string(&h.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
