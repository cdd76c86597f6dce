//! Provenance stamps and small helpers shared by every emitted report.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Identifies the configuration and seed that produced an output file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config: &impl Serialize, seed: u64) -> Self {
        Provenance {
            config_hash: config_hash(config),
            seed,
        }
    }
}

/// SHA-256 of the canonical (compact, field-ordered) JSON rendering.
pub fn config_hash(config: &impl Serialize) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}
