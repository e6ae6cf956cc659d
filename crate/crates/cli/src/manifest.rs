use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";
/// Machine-specific locations of inputs; never hashed.
pub const INPUTS_FILE: &str = "inputs.json";

/// Record of one command's outputs: resolved config plus a sha256 per file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub config: PipelineConfig,
    pub files: BTreeMap<String, String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| filmvox::Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn collect(
    root: &Path,
    dir: &Path,
    skip: &[&str],
    out: &mut BTreeMap<String, String>,
) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| filmvox::Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        let rel = p
            .strip_prefix(root)
            .expect("entry under root")
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        if skip.contains(&rel.as_str()) {
            continue;
        }
        if p.is_dir() {
            collect(root, &p, skip, out)?;
        } else {
            out.insert(rel, sha256_file(&p)?);
        }
    }
    Ok(())
}

/// Hash every file under `dir` except the manifest, lock, inputs file and
/// the top-level entries in `skip`, then write `manifest.json`.
pub fn write_manifest(
    dir: &Path,
    command: &str,
    config: &PipelineConfig,
    skip: &[&str],
) -> Result<Manifest> {
    let mut all_skip = vec![MANIFEST_FILE, LOCK_FILE, INPUTS_FILE];
    all_skip.extend_from_slice(skip);
    let mut files = BTreeMap::new();
    collect(dir, dir, &all_skip, &mut files)?;
    let m = Manifest {
        command: command.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        files,
    };
    filmvox::io::write_json(&dir.join(MANIFEST_FILE), &m)?;
    Ok(m)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let p = dir.join(MANIFEST_FILE);
    if !p.is_file() {
        return Err(CliError::Missing(format!("{} not found", p.display())));
    }
    Ok(filmvox::io::read_json(&p)?)
}

/// sha256 of the manifest file bytes.
pub fn manifest_hash(dir: &Path) -> Result<String> {
    sha256_file(&dir.join(MANIFEST_FILE))
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| filmvox::Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::Locked(dir.display().to_string()))
            }
            Err(e) => Err(filmvox::Error::io(&path, e).into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunLock::acquire(dir.path()).unwrap();
        let err = RunLock::acquire(dir.path()).unwrap_err();
        assert!(matches!(err, CliError::Locked(_)));
        assert_eq!(err.exit_code(), 3);
        drop(a);
        RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn manifest_skips_bookkeeping_files() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("sub/deeper")).unwrap();
        fs::write(dir.path().join("a.txt"), "a").unwrap();
        fs::write(dir.path().join("sub/deeper/b.txt"), "b").unwrap();
        fs::write(dir.path().join(INPUTS_FILE), "/somewhere").unwrap();
        fs::create_dir_all(dir.path().join("eval")).unwrap();
        fs::write(dir.path().join("eval/x"), "x").unwrap();
        let m = write_manifest(dir.path(), "test", &PipelineConfig::default(), &["eval"]).unwrap();
        let keys: Vec<_> = m.files.keys().cloned().collect();
        assert_eq!(
            keys,
            vec!["a.txt".to_string(), "sub/deeper/b.txt".to_string()]
        );
        let h1 = manifest_hash(dir.path()).unwrap();
        write_manifest(dir.path(), "test", &PipelineConfig::default(), &["eval"]).unwrap();
        assert_eq!(h1, manifest_hash(dir.path()).unwrap());
        assert_eq!(read_manifest(dir.path()).unwrap(), m);
    }
}
