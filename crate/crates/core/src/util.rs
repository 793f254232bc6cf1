//! Shared text-format and hashing helpers used by the on-disk artifact
//! formats (datasets, models, caches, manifests).

use sha2::{Digest, Sha256};

/// Formats an `f64` with 17 significant digits in scientific notation so
/// that parsing the result recovers the original bit pattern.
pub fn fmt_f64(v: f64) -> String {
    format!("{:.16e}", v)
}

/// Parses a float, rejecting NaN and infinities.
pub fn parse_finite_f64(s: &str) -> Option<f64> {
    let v: f64 = s.parse().ok()?;
    if v.is_finite() {
        Some(v)
    } else {
        None
    }
}

/// SHA-256 content hash as a lowercase hex string. Artifact files are bound
/// together by these fingerprints.
pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}
