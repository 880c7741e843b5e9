//! Run directories: resolved config, artifacts and a CRC32 manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

pub const MANIFEST: &str = "MANIFEST";
pub const CONFIG_FILE: &str = "config.resolved";
pub const METRICS_FILE: &str = "metrics.csv";

/// Default output root, overridable with `SAQ_RUN_ROOT`.
pub fn run_root() -> PathBuf {
    std::env::var_os("SAQ_RUN_ROOT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Creates `path`. An existing non-empty directory is replaced only with
    /// `force`, and only if it looks like a previous run (has a MANIFEST).
    pub fn create(path: &Path, force: bool) -> Result<Self> {
        if path.exists() {
            if !path.is_dir() {
                bail!("{} exists and is not a directory", path.display());
            }
            let non_empty = fs::read_dir(path)?.next().is_some();
            if non_empty {
                if !force {
                    bail!("{} is not empty; pass --force to overwrite", path.display());
                }
                if !path.join(MANIFEST).is_file() {
                    bail!("{} is not empty and has no {MANIFEST}; refusing to overwrite", path.display());
                }
                fs::remove_dir_all(path).with_context(|| format!("clearing {}", path.display()))?;
            }
        }
        fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self { path: path.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let p = self.join(name);
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))
    }

    /// Writes the manifest over every file currently in the directory.
    pub fn finish(self) -> Result<PathBuf> {
        let mut files = Vec::new();
        collect_files(&self.path, &self.path, &mut files)?;
        files.retain(|f| f != MANIFEST);
        files.sort();
        let mut text = String::new();
        for f in &files {
            let bytes = fs::read(self.path.join(f))?;
            text.push_str(&format!("{:08x}  {:>10}  {f}\n", crc32fast::hash(&bytes), bytes.len()));
        }
        self.write(MANIFEST, text)?;
        Ok(self.path)
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root)?.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>();
            out.push(rel.join("/"));
        }
    }
    Ok(())
}

/// One manifest line: CRC32, byte length and relative path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub crc32: u32,
    pub len: u64,
    pub file: String,
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    text.lines()
        .map(|l| {
            let mut parts = l.split_whitespace();
            let (Some(crc), Some(len), Some(file)) = (parts.next(), parts.next(), parts.next()) else {
                bail!("malformed manifest line '{l}'");
            };
            Ok(ManifestEntry {
                crc32: u32::from_str_radix(crc, 16)?,
                len: len.parse()?,
                file: file.to_string(),
            })
        })
        .collect()
}

/// Files whose CRC or length no longer match the manifest.
pub fn verify_manifest(dir: &Path) -> Result<Vec<String>> {
    let mut bad = Vec::new();
    for e in read_manifest(dir)? {
        match fs::read(dir.join(&e.file)) {
            Ok(b) if crc32fast::hash(&b) == e.crc32 && b.len() as u64 == e.len => {}
            _ => bad.push(e.file),
        }
    }
    Ok(bad)
}

/// Refuses to replace an existing file without `force`.
pub fn check_output_file(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!("{} exists; pass --force to overwrite", path.display());
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lists_every_file_with_its_crc() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = RunDir::create(&tmp.path().join("run"), false).unwrap();
        dir.write("a.txt", "hello").unwrap();
        fs::create_dir_all(dir.join("cells")).unwrap();
        dir.write("cells/b.csv", "x\n1\n").unwrap();
        let path = dir.finish().unwrap();
        let m = read_manifest(&path).unwrap();
        assert_eq!(m.iter().map(|e| e.file.as_str()).collect::<Vec<_>>(), ["a.txt", "cells/b.csv"]);
        assert_eq!(m[0].crc32, crc32fast::hash(b"hello"));
        assert!(verify_manifest(&path).unwrap().is_empty());
        fs::write(path.join("a.txt"), "changed").unwrap();
        assert_eq!(verify_manifest(&path).unwrap(), ["a.txt"]);
    }

    #[test]
    fn existing_directories_need_force_and_a_manifest() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("run");
        let d = RunDir::create(&p, false).unwrap();
        d.write("x", "1").unwrap();
        d.finish().unwrap();
        assert!(RunDir::create(&p, false).is_err());
        assert_eq!(fs::read_to_string(p.join("x")).unwrap(), "1");
        RunDir::create(&p, true).unwrap();
        assert!(!p.join("x").exists());

        let other = tmp.path().join("other");
        fs::create_dir_all(&other).unwrap();
        fs::write(other.join("keep"), "data").unwrap();
        assert!(RunDir::create(&other, true).is_err());
        assert!(other.join("keep").exists());
    }
}
