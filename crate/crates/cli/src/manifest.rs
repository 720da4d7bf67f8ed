//! The per-run manifest: config echo, seeds, versions and content hashes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub run: u64,
    pub synthesis: u64,
    pub rl: u64,
    pub eval: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub core_version: String,
    pub checkpoint_format: u32,
    pub config: RunConfig,
    pub seeds: Seeds,
    pub inputs: Vec<FileHash>,
    /// Every other file under the output directory, by relative path.
    pub artifacts: Vec<FileHash>,
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let digest = Sha256::digest(&bytes);
    let hex = digest.iter().map(|b| format!("{b:02x}")).collect();
    Ok((hex, bytes.len() as u64))
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            walk(root, &path, out)?;
        } else if path != root.join(MANIFEST_FILE) {
            out.push(path);
        }
    }
    Ok(())
}

fn hash_entry(path: &Path, shown: String) -> Result<FileHash> {
    let (sha256, bytes) = sha256_file(path)?;
    Ok(FileHash { path: shown, sha256, bytes })
}

pub fn write(command: &str, config: &RunConfig, inputs: &[PathBuf], out: &Path) -> Result<Manifest> {
    let mut files = Vec::new();
    walk(out, out, &mut files)?;
    let artifacts = files
        .iter()
        .map(|p| {
            let rel = p.strip_prefix(out).expect("walked under out").to_string_lossy().replace('\\', "/");
            hash_entry(p, rel)
        })
        .collect::<Result<_>>()?;
    let inputs = inputs
        .iter()
        .map(|p| hash_entry(p, p.display().to_string()))
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        command: command.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        core_version: agent_omit::VERSION.to_string(),
        checkpoint_format: agent_omit::policy::FORMAT_VERSION,
        config: config.clone(),
        seeds: Seeds {
            run: config.seed,
            synthesis: config.synthesis.seed,
            rl: config.rl.seed,
            eval: config.eval.seeds.clone(),
        },
        inputs,
        artifacts,
    };
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(out.join(MANIFEST_FILE), text)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists_every_file_with_its_hash() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("b.csv"), "x\n").unwrap();
        fs::write(dir.path().join("sub/a.ckpt"), "").unwrap();
        let m = write("eval", &RunConfig::default(), &[], dir.path()).unwrap();
        let paths: Vec<_> = m.artifacts.iter().map(|a| a.path.as_str()).collect();
        assert_eq!(paths, ["b.csv", "sub/a.ckpt"]);
        assert_eq!(m.artifacts[1].sha256, "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
        let again = write("eval", &RunConfig::default(), &[], dir.path()).unwrap();
        assert_eq!(again, m);
    }
}
