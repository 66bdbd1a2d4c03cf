//! Run manifests and git-style content hashes (SHA-256 object format).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rcldt_core::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub threads: usize,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>, threads: usize) -> Self {
        Self {
            tool: "rcldt",
            version: env!("CARGO_PKG_VERSION"),
            command: command.into(),
            argv: std::env::args().skip(1).collect(),
            config,
            seed,
            threads,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, key: &str, path: &Path) -> Result<()> {
        self.inputs.insert(key.into(), content_hash(path)?);
        Ok(())
    }

    pub fn output(&mut self, key: &str, path: &Path) -> Result<()> {
        self.outputs.insert(key.into(), content_hash(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// `manifest.json` inside an output folder, `<file>.manifest.json` beside an output file.
pub fn default_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join("manifest.json")
    } else {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        out.with_file_name(name)
    }
}

fn is_manifest(name: &str) -> bool {
    name == "manifest.json" || name.ends_with(".manifest.json")
}

fn object(kind: &str, body: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(format!("{kind} {}\0", body.len()).as_bytes());
    h.update(body);
    h.finalize().into()
}

fn hash_raw(path: &Path) -> Result<[u8; 32]> {
    if !path.is_dir() {
        return Ok(object("blob", &fs::read(path)?));
    }
    let mut entries: Vec<(String, PathBuf)> = fs::read_dir(path)?
        .filter_map(|e| e.ok())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .filter(|(name, _)| !is_manifest(name))
        .collect();
    entries.sort();
    let mut tree = Vec::new();
    for (name, p) in entries {
        let mode = if p.is_dir() { "40000" } else { "100644" };
        tree.extend_from_slice(format!("{mode} {name}\0").as_bytes());
        tree.extend_from_slice(&hash_raw(&p)?);
    }
    Ok(object("tree", &tree))
}

/// Blob hash of a file, or tree hash of a folder (manifests excluded).
pub fn content_hash(path: &Path) -> Result<String> {
    Ok(hash_raw(path)?.iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_uses_the_git_header() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.txt");
        fs::write(&f, b"hello\n").unwrap();
        let want: String = Sha256::digest(b"blob 6\0hello\n").iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(content_hash(&f).unwrap(), want);
    }

    #[test]
    fn tree_hash_ignores_manifests_and_tracks_content() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x.pgm"), b"1").unwrap();
        let before = content_hash(dir.path()).unwrap();
        fs::write(dir.path().join("manifest.json"), b"{}").unwrap();
        assert_eq!(content_hash(dir.path()).unwrap(), before);
        fs::write(dir.path().join("x.pgm"), b"2").unwrap();
        assert_ne!(content_hash(dir.path()).unwrap(), before);
    }

    #[test]
    fn manifest_sits_beside_files_and_inside_folders() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(default_path(dir.path()), dir.path().join("manifest.json"));
        assert_eq!(default_path(&dir.path().join("m.ckpt")), dir.path().join("m.ckpt.manifest.json"));
    }
}
