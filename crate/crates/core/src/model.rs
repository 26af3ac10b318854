//! Pieces shared by every network: the error type and flat config
//! (de)serialization for checkpoints.

use std::collections::BTreeMap;

use confaug_nn::NnError;
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("embedding dimension {0} must be even and at least 2")]
    OddDimension(usize),
    #[error("class {class} out of range for {count} classes")]
    ClassOutOfRange { class: usize, count: usize },
    #[error("timestep {t} out of range for {len} steps")]
    TimestepOutOfRange { t: usize, len: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// `prefix.field=<json>` entries for every top-level field of `value`.
pub fn flatten_config<S: Serialize>(prefix: &str, value: &S) -> BTreeMap<String, String> {
    let v = serde_json::to_value(value).expect("config types serialize");
    let mut out = BTreeMap::new();
    if let serde_json::Value::Object(map) = v {
        for (k, v) in map {
            out.insert(format!("{prefix}.{k}"), v.to_string());
        }
    }
    out
}

/// Inverse of [`flatten_config`].
pub fn unflatten_config<D: DeserializeOwned>(prefix: &str, map: &BTreeMap<String, String>) -> Result<D> {
    let p = format!("{prefix}.");
    let mut obj = serde_json::Map::new();
    for (k, v) in map {
        if let Some(field) = k.strip_prefix(&p) {
            let parsed = serde_json::from_str(v)
                .map_err(|e| ModelError::Checkpoint(format!("bad value for `{k}`: {e}")))?;
            obj.insert(field.to_string(), parsed);
        }
    }
    serde_json::from_value(serde_json::Value::Object(obj))
        .map_err(|e| ModelError::Checkpoint(format!("`{prefix}` config: {e}")))
}

/// Largest of 8, 4, 2, 1 dividing `channels`.
pub fn groups_for(channels: usize, preferred: usize) -> usize {
    [preferred, 8, 4, 2, 1].into_iter().find(|&g| g > 0 && channels % g == 0).unwrap_or(1)
}
