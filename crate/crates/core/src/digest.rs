use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of the compact JSON serialization. Struct fields serialize in
/// declaration order, so equal values give equal digests.
pub fn digest_json<S: Serialize>(value: &S) -> Result<String> {
    Ok(digest_bytes(&serde_json::to_vec(value)?))
}

pub fn digest_file(path: impl AsRef<std::path::Path>) -> Result<String> {
    Ok(digest_bytes(&std::fs::read(path)?))
}
