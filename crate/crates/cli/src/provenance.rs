//! Run records: what was read, what was written, under which settings.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const PROVENANCE_SCHEMA_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, Serialize)]
pub struct FileDigest {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

impl FileDigest {
    pub fn of(role: &str, path: &Path) -> Result<Self> {
        let data = std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
        Ok(FileDigest { role: role.to_owned(), path: path.to_owned(), sha256: sha256_hex(&data), bytes: data.len() as u64 })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Provenance {
    pub schema_version: u32,
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: String,
    pub params: serde_json::Value,
    pub config_sha256: String,
    pub taxonomy_sha256: String,
    pub workers: Option<usize>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Digest of everything that determines the outputs.
    pub run_sha256: String,
}

impl Provenance {
    pub fn new(subcommand: &str, params: serde_json::Value, config_json: &str, taxonomy_json: &str) -> Self {
        Provenance {
            schema_version: PROVENANCE_SCHEMA_VERSION,
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            subcommand: subcommand.to_owned(),
            params,
            config_sha256: sha256_hex(config_json.as_bytes()),
            taxonomy_sha256: sha256_hex(taxonomy_json.as_bytes()),
            workers: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            status: "ok",
            error: None,
            run_sha256: String::new(),
        }
    }

    /// Hashes the version, subcommand, parameters, config, taxonomy and
    /// input contents; paths and worker count are left out.
    pub fn seal(&mut self) {
        let inputs: Vec<(&str, &str)> = self.inputs.iter().map(|d| (d.role.as_str(), d.sha256.as_str())).collect();
        let canonical = serde_json::json!({
            "version": self.version,
            "subcommand": self.subcommand,
            "params": self.params,
            "config": self.config_sha256,
            "taxonomy": self.taxonomy_sha256,
            "inputs": inputs,
        });
        self.run_sha256 = sha256_hex(canonical.to_string().as_bytes());
    }

    pub fn emit(&self, dest: Option<&Path>) -> Result<()> {
        match dest {
            Some(p) => {
                let text = serde_json::to_string_pretty(self)? + "\n";
                std::fs::write(p, text).with_context(|| format!("cannot write {}", p.display()))
            }
            None => {
                eprintln!("{}", serde_json::to_string(self)?);
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seal_tracks_config_params_and_inputs() {
        let base = || {
            let mut p = Provenance::new("aggregate", serde_json::json!({"tiled": false}), "{}", "tax");
            p.inputs.push(FileDigest { role: "bundle".into(), path: "a".into(), sha256: "00".into(), bytes: 1 });
            p
        };
        let mut a = base();
        a.seal();
        let mut moved = base();
        moved.inputs[0].path = "elsewhere".into();
        moved.workers = Some(8);
        moved.seal();
        assert_eq!(a.run_sha256, moved.run_sha256);
        for tweak in [
            |p: &mut Provenance| p.inputs[0].sha256 = "01".into(),
            |p: &mut Provenance| p.config_sha256 = sha256_hex(b"{\"sigma\":1}"),
            |p: &mut Provenance| p.params = serde_json::json!({"tiled": true}),
        ] {
            let mut b = base();
            tweak(&mut b);
            b.seal();
            assert_ne!(a.run_sha256, b.run_sha256);
        }
    }

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }
}
