//! Run manifests: every artifact a command emits is reachable from exactly
//! one manifest, with digests for drift detection.

use crate::config::Config;
use crate::util::{atomic_write, sha256_file};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArtifactRef {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub resolved_config: BTreeMap<String, String>,
    pub config_digest: String,
    pub seeds: BTreeMap<String, u64>,
    /// Input checkpoints consumed by this run, as absolute-ish references.
    pub inputs: Vec<ArtifactRef>,
    /// Outputs owned by this run, relative to the manifest directory.
    pub artifacts: Vec<ArtifactRef>,
    pub started_at_unix: u64,
    pub finished_at_unix: Option<u64>,
    pub toolkit_version: String,
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(command: &str, config: &Config) -> Self {
        let digest = config.digest();
        Self {
            run_id: format!("{command}-{}", &digest[..12]),
            command: command.to_string(),
            resolved_config: config.as_map().clone(),
            config_digest: digest,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            artifacts: Vec::new(),
            started_at_unix: now_unix(),
            finished_at_unix: None,
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn record_seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.to_string(), seed);
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(ArtifactRef {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    /// Register an artifact living under `dir` (the manifest directory).
    pub fn record_artifact(&mut self, dir: &Path, relative: &str) -> Result<()> {
        let full = dir.join(relative);
        let sha = sha256_file(&full)?;
        // a re-recorded artifact replaces its previous digest
        self.artifacts.retain(|a| a.path != relative);
        self.artifacts.push(ArtifactRef {
            path: relative.to_string(),
            sha256: sha,
        });
        Ok(())
    }

    pub fn finish(&mut self) {
        self.finished_at_unix = Some(now_unix());
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        atomic_write(
            &dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(self)?.as_bytes(),
        )
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = std::fs::read(&path)
            .map_err(|e| Error::Integrity(format!("missing manifest at {}: {e}", path.display())))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Digest of a named artifact, if recorded.
    pub fn artifact_sha(&self, relative: &str) -> Option<&str> {
        self.artifacts
            .iter()
            .find(|a| a.path == relative)
            .map(|a| a.sha256.as_str())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Drift {
    pub manifest_dir: PathBuf,
    pub artifact: String,
    pub expected_sha256: String,
    pub observed: String,
}

/// Walk `root` for manifests and re-hash every artifact they claim.
pub fn verify_tree(root: &Path) -> Result<(usize, Vec<Drift>)> {
    let mut checked = 0usize;
    let mut drifts = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let Ok(entries) = std::fs::read_dir(&dir) else { continue };
        let mut names: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
        names.sort();
        for path in names {
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().map(|n| n == MANIFEST_FILE).unwrap_or(false) {
                let mdir = path.parent().unwrap().to_path_buf();
                let manifest = RunManifest::read(&mdir)?;
                for a in &manifest.artifacts {
                    checked += 1;
                    let target = mdir.join(&a.path);
                    let observed = match sha256_file(&target) {
                        Ok(sha) => {
                            if sha == a.sha256 {
                                continue;
                            }
                            sha
                        }
                        Err(_) => "missing".to_string(),
                    };
                    drifts.push(Drift {
                        manifest_dir: mdir.clone(),
                        artifact: a.path.clone(),
                        expected_sha256: a.sha256.clone(),
                        observed,
                    });
                }
            }
        }
    }
    Ok((checked, drifts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip_and_verify() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = Config::new();
        cfg.set("x", 1);
        let mut m = RunManifest::new("test", &cfg);
        m.record_seed("master", 7);
        std::fs::write(dir.path().join("out.bin"), b"payload").unwrap();
        m.record_artifact(dir.path(), "out.bin").unwrap();
        m.finish();
        m.write(dir.path()).unwrap();

        let back = RunManifest::read(dir.path()).unwrap();
        assert_eq!(back.run_id, m.run_id);
        assert_eq!(back.seeds["master"], 7);
        assert!(back.artifact_sha("out.bin").is_some());

        let (checked, drifts) = verify_tree(dir.path()).unwrap();
        assert_eq!(checked, 1);
        assert!(drifts.is_empty());

        // tamper and observe drift
        std::fs::write(dir.path().join("out.bin"), b"tampered").unwrap();
        let (_, drifts) = verify_tree(dir.path()).unwrap();
        assert_eq!(drifts.len(), 1);
        assert_eq!(drifts[0].artifact, "out.bin");

        // delete and observe missing
        std::fs::remove_file(dir.path().join("out.bin")).unwrap();
        let (_, drifts) = verify_tree(dir.path()).unwrap();
        assert_eq!(drifts[0].observed, "missing");
    }
}
