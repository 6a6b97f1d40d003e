//! Report files: JSON envelopes carrying the config hash and seed, a
//! manifest of file digests, and the audit that cross-checks them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    stage: &'a str,
    config_hash: &'a str,
    seed: u64,
    report: &'a T,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    /// File name -> SHA-256 of its bytes.
    pub files: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

/// Writes files into the output directory and remembers their digests.
#[derive(Debug)]
pub struct ReportWriter {
    dir: PathBuf,
    config_hash: String,
    seed: u64,
    files: BTreeMap<String, String>,
}

impl ReportWriter {
    pub fn new(dir: &Path, config_hash: &str, seed: u64) -> Result<ReportWriter, PipelineError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(ReportWriter { dir: dir.to_path_buf(), config_hash: config_hash.into(), seed, files: BTreeMap::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn bytes(&mut self, name: &str, data: &[u8]) -> Result<PathBuf, PipelineError> {
        let path = self.dir.join(name);
        fs::write(&path, data).map_err(io_err(&path))?;
        self.files.insert(name.to_string(), sha256_hex(data));
        Ok(path)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, stage: &str, report: &T) -> Result<PathBuf, PipelineError> {
        let env = Envelope { stage, config_hash: &self.config_hash, seed: self.seed, report };
        let mut data = serde_json::to_vec_pretty(&env).map_err(|e| PipelineError::Data(format!("{name}: {e}")))?;
        data.push(b'\n');
        self.bytes(name, &data)
    }

    /// Writes the manifest, keeping entries from an earlier command of the
    /// same configuration.
    pub fn finish(self) -> Result<Manifest, PipelineError> {
        let path = self.dir.join(MANIFEST);
        let mut files = BTreeMap::new();
        if let Ok(text) = fs::read_to_string(&path) {
            if let Ok(old) = serde_json::from_str::<Manifest>(&text) {
                if old.config_hash == self.config_hash && old.seed == self.seed {
                    files = old.files;
                }
            }
        }
        files.extend(self.files);
        let manifest = Manifest { config_hash: self.config_hash, seed: self.seed, files };
        let mut data = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        data.push(b'\n');
        fs::write(&path, data).map_err(io_err(&path))?;
        Ok(manifest)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuditReport {
    pub config_hash: String,
    pub files_checked: usize,
    pub problems: Vec<String>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.problems.is_empty()
    }
}

/// Checks every manifest entry's digest and every JSON report's embedded
/// config hash and seed against the manifest.
pub fn audit(dir: &Path) -> Result<AuditReport, PipelineError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
    let mut problems = Vec::new();
    for (name, digest) in &manifest.files {
        let file = dir.join(name);
        let Ok(data) = fs::read(&file) else {
            problems.push(format!("{name}: missing"));
            continue;
        };
        if &sha256_hex(&data) != digest {
            problems.push(format!("{name}: contents changed since the run"));
        }
        if name.ends_with(".json") {
            match serde_json::from_slice::<serde_json::Value>(&data) {
                Ok(v) if v.get("stage").is_some() => {
                    if v.get("config_hash").and_then(|h| h.as_str()) != Some(manifest.config_hash.as_str()) {
                        problems.push(format!("{name}: config hash differs from the manifest"));
                    }
                    if v.get("seed").and_then(|s| s.as_u64()) != Some(manifest.seed) {
                        problems.push(format!("{name}: seed differs from the manifest"));
                    }
                }
                Ok(_) => {}
                Err(e) => problems.push(format!("{name}: {e}")),
            }
        }
    }
    Ok(AuditReport { config_hash: manifest.config_hash, files_checked: manifest.files.len(), problems })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn audit_catches_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = ReportWriter::new(dir.path(), "abc", 1).unwrap();
        w.json("a.json", "x", &vec![1, 2]).unwrap();
        w.bytes("b.csv", b"h\n1\n").unwrap();
        w.finish().unwrap();
        assert!(audit(dir.path()).unwrap().passed());

        let stray = Envelope { stage: "x", config_hash: "zzz", seed: 1, report: &0 };
        let data = serde_json::to_vec(&stray).unwrap();
        fs::write(dir.path().join("a.json"), &data).unwrap();
        let r = audit(dir.path()).unwrap();
        assert_eq!(r.problems.len(), 2, "{:?}", r.problems);
    }

    #[test]
    fn manifest_merges_same_config() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = ReportWriter::new(dir.path(), "abc", 1).unwrap();
        w.bytes("one.csv", b"1").unwrap();
        w.finish().unwrap();
        let mut w = ReportWriter::new(dir.path(), "abc", 1).unwrap();
        w.bytes("two.csv", b"2").unwrap();
        assert_eq!(w.finish().unwrap().files.len(), 2);
        let mut w = ReportWriter::new(dir.path(), "def", 1).unwrap();
        w.bytes("three.csv", b"3").unwrap();
        assert_eq!(w.finish().unwrap().files.len(), 1);
    }
}
