//! Versioned JSON checkpoints.
//!
//! Floats are written with the shortest round-trip representation and read
//! back with exact parsing, so save/load reproduces every `f64` bit for bit.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;
pub const MLP_FORMAT: &str = "stfbnn.mlp";
pub const STF_FORMAT: &str = "stfbnn.stf";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope<T> {
    format: String,
    version: u32,
    payload: T,
}

pub fn to_json<T: Serialize>(format: &str, value: &T) -> Result<String> {
    let env = Envelope {
        format: format.to_string(),
        version: VERSION,
        payload: value,
    };
    Ok(serde_json::to_string(&env)?)
}

pub fn from_json<T: DeserializeOwned>(text: &str, format: &str) -> Result<T> {
    let env: Envelope<T> = serde_json::from_str(text)?;
    if env.format != format {
        return Err(Error::input(format!(
            "checkpoint format `{}`, expected `{format}`",
            env.format
        )));
    }
    if env.version != VERSION {
        return Err(Error::input(format!(
            "checkpoint version {} unsupported (want {VERSION})",
            env.version
        )));
    }
    Ok(env.payload)
}

pub fn save<T: Serialize>(path: &Path, format: &str, value: &T) -> Result<()> {
    let text = to_json(format, value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load<T: DeserializeOwned>(path: &Path, format: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text, format)
}

/// Hex SHA-256 of a byte string, truncated to 16 characters.
pub fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(digest)[..16].to_string()
}
