//! Atomic file output, content hashes and run manifests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Shortest decimal text that parses back to the same `f64`.
pub fn fmt_num(v: f64) -> String {
    format!("{v}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// A 64-bit seed derived from a base seed, a purpose and a geography, so
/// that each geography's stream does not depend on which others are run.
pub fn derive_seed(base: u64, purpose: &str, geo_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(purpose.as_bytes());
    h.update([0]);
    h.update(geo_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

/// A directory name for a geography identifier.
pub fn geo_dir_name(geo_id: &str) -> String {
    geo_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputHash {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

/// Everything needed to rerun a command: the resolved configuration, the
/// hashes of its inputs, and the hashes of what it wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<FileHash>,
    pub summary: serde_json::Value,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::invalid(format!("{}: not a manifest: {e}", path.display())))
    }
}

/// Collects the files of one run and writes the manifest last.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    written: Vec<FileHash>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes `bytes` to `rel` (a `/`-separated path under the root).
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.root.join(rel), bytes)?;
        self.written.push(FileHash {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| CliError::Io(format!("{rel}: {e}")))?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    pub fn finish<C: Serialize>(
        self,
        command: &str,
        seed: u64,
        config: &C,
        inputs: Vec<InputHash>,
        summary: serde_json::Value,
    ) -> Result<Manifest> {
        let config = serde_json::to_value(config).map_err(|e| CliError::Io(e.to_string()))?;
        let config_text = serde_json::to_string(&config).map_err(|e| CliError::Io(e.to_string()))?;
        let m = Manifest {
            tool: "popinterp".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            config_sha256: sha256_hex(config_text.as_bytes()),
            config,
            inputs,
            outputs: self.written,
            summary,
        };
        let mut text = serde_json::to_string_pretty(&m).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        write_atomic(&self.root.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(m)
    }
}

/// Serialises rows to CSV bytes.
pub fn csv_bytes<I, R>(header: &[&str], rows: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| CliError::Io(e.to_string()))?;
    for r in rows {
        w.write_record(r).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}
