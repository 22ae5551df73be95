//! Provenance record written next to every command's output.

use std::fs::File;
use std::io::{self, Read};
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::ingest::SAMPLER_ALGORITHM;
use crate::seed::SEED_RULE;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Wall-clock times, kept apart so the rest of the manifest is stable
/// across reruns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Timestamps {
    pub started: String,
    pub finished: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    /// SHA-256 of the canonical JSON of the effective configuration.
    pub config_hash: String,
    pub root_seed: u64,
    pub input_digests: Vec<InputDigest>,
    pub sampler: String,
    pub seed_rule: String,
    pub timestamps: Timestamps,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> io::Result<InputDigest> {
    let mut hasher = Sha256::new();
    let mut file = File::open(path)?;
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: hex::encode(hasher.finalize()),
    })
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    /// Starts a manifest; `config` is hashed through its JSON form.
    pub fn begin(command: &str, config: &impl Serialize, root_seed: u64, input_digests: Vec<InputDigest>) -> Self {
        let canonical = serde_json::to_vec(config).expect("config serializes");
        let started = now();
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_hash: sha256_hex(&canonical),
            root_seed,
            input_digests,
            sampler: SAMPLER_ALGORITHM.to_string(),
            seed_rule: SEED_RULE.to_string(),
            timestamps: Timestamps {
                finished: started.clone(),
                started,
            },
        }
    }

    pub fn finish(&mut self) {
        self.timestamps.finished = now();
    }

    pub fn started_at(&self) -> Option<DateTime<Utc>> {
        DateTime::parse_from_rfc3339(&self.timestamps.started)
            .ok()
            .map(|t| t.with_timezone(&Utc))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_depends_only_on_config() {
        let a = RunManifest::begin("x", &serde_json::json!({"k": 3}), 7, vec![]);
        let b = RunManifest::begin("x", &serde_json::json!({"k": 3}), 7, vec![]);
        let c = RunManifest::begin("x", &serde_json::json!({"k": 4}), 7, vec![]);
        assert_eq!(a.config_hash, b.config_hash);
        assert_ne!(a.config_hash, c.config_hash);
        assert!(a.started_at().is_some());
    }

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
