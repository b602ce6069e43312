//! Content-hashed JSON checkpoints.
//!
//! The envelope stores the SHA-256 of the payload text, so a loaded checkpoint is exactly
//! the one a record refers to. A steganography checkpoint is the shared key between Alice
//! and Bob: whoever holds the file can extract the hidden signal.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};

use crate::error::{io_err, HarnessError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<'a> {
    kind: String,
    version: u32,
    sha256: String,
    #[serde(borrow)]
    payload: &'a RawValue,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `value` under `path` and returns its content hash. The file is written to a
/// sibling temp file first and renamed into place.
pub fn save<T: Serialize>(path: &Path, kind: &str, value: &T) -> Result<String> {
    let json_err = |source| HarnessError::Json { path: path.to_path_buf(), source };
    let payload = serde_json::to_string(value).map_err(json_err)?;
    let sha256 = sha256_hex(payload.as_bytes());
    let raw = RawValue::from_string(payload).map_err(json_err)?;
    let env = Envelope {
        kind: kind.to_string(),
        version: FORMAT_VERSION,
        sha256: sha256.clone(),
        payload: &raw,
    };
    let text = serde_json::to_string(&env).map_err(json_err)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(sha256)
}

/// Reads a checkpoint of the given kind, verifying its content hash.
pub fn load<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<(T, String)> {
    let json_err = |source| HarnessError::Json { path: path.to_path_buf(), source };
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let env: Envelope = serde_json::from_str(&text).map_err(json_err)?;
    if env.kind != kind {
        return Err(HarnessError::WrongKind {
            path: path.to_path_buf(),
            expected: kind.to_string(),
            found: env.kind,
        });
    }
    let actual = sha256_hex(env.payload.get().as_bytes());
    if actual != env.sha256 {
        return Err(HarnessError::HashMismatch {
            path: path.to_path_buf(),
            expected: env.sha256,
            actual,
        });
    }
    let value = serde_json::from_str(env.payload.get()).map_err(json_err)?;
    Ok((value, actual))
}
