//! Artifact envelope: every report embeds the scenario name, the SHA-256
//! of the canonical config serialization and the seed, so a run can be
//! traced back to its exact inputs.

use crate::config::RunConfig;
use mvsde::error::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Serialize)]
pub struct Artifact<T: Serialize> {
    pub scenario: String,
    pub config_sha256: String,
    pub seed: u64,
    pub report: T,
}

/// Hash of the canonical (round-tripped) config serialization; whitespace
/// and comments in the user's file do not change it.
pub fn config_hash(cfg: &RunConfig) -> String {
    let mut hasher = Sha256::new();
    hasher.update(cfg.to_toml().as_bytes());
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn wrap<T: Serialize>(cfg: &RunConfig, report: T) -> Artifact<T> {
    Artifact {
        scenario: cfg.scenario.clone(),
        config_sha256: config_hash(cfg),
        seed: cfg.seed,
        report,
    }
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, artifact: &Artifact<T>) -> Result<()> {
    let text = serde_json::to_string_pretty(artifact)
        .map_err(|e| mvsde::Error::Config(format!("serialize {name}: {e}")))?;
    std::fs::write(dir.join(name), text + "\n")?;
    Ok(())
}

pub fn write_bytes(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    std::fs::write(dir.join(name), bytes)?;
    Ok(())
}
