//! Seed derivation. Every random stream is keyed by the root seed and a label,
//! so reruns of one stage do not disturb the others.

use sha2::{Digest, Sha256};

/// First 8 bytes (little-endian) of SHA-256 over the root seed's 8
/// little-endian bytes followed by the UTF-8 label.
pub fn derive(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}
