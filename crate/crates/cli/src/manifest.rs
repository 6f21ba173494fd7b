//! Run manifests: what was run, with which settings, on which inputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use jamt::Result;
use sha2::{Digest, Sha256};

/// Git-style object id of a file's content: SHA-256 over
/// `blob <len>\0<content>`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(bytes);
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Flat `key=value` record of one run.
#[derive(Debug, Default)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        let mut m = Manifest::default();
        m.set("command", command);
        m.set("argv", std::env::args().collect::<Vec<_>>().join(" "));
        m.set("version", env!("CARGO_PKG_VERSION"));
        m
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    /// Records every `key=value` line of `text` under `config.`.
    pub fn config(&mut self, text: &str) {
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                self.set(&format!("config.{}", k.trim()), v.trim());
            }
        }
    }

    /// Hashes a file, or every file below a directory.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let mut files = Vec::new();
        collect_files(path, &mut files)?;
        for f in files {
            let hash = blob_hash(&fs::read(&f)?);
            self.set(&format!("input.{}", f.display()), hash);
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries = fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<Vec<_>>>()?;
        entries.sort();
        for e in entries {
            collect_files(&e, out)?;
        }
    } else {
        // surfaces a missing input as an I/O error naming the path
        fs::metadata(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        out.push(path.to_path_buf());
    }
    Ok(())
}

/// Manifest path for an output file (`out.manifest`) or directory
/// (`out/manifest.txt`).
pub fn path_for(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("manifest.txt")
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(".manifest");
        PathBuf::from(s)
    }
}
