use serde::Serialize;
use sha2::{Digest, Sha256};

/// SHA-256 of the canonical JSON form of `value` (object keys sorted).
pub fn json_digest<T: Serialize + ?Sized>(value: &T) -> String {
    let canonical = serde_json::to_value(value)
        .and_then(|v| serde_json::to_string(&v))
        .expect("serializable value");
    bytes_digest(canonical.as_bytes())
}

pub fn bytes_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
