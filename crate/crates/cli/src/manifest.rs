use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Versions {
    pub dwl: &'static str,
    pub checkpoint_format: &'static str,
}

/// Record of one command invocation, written last into the output directory.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub status: &'static str,
    pub exit_code: i32,
    pub error: Option<String>,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    /// Paths relative to the output directory.
    pub outputs: Vec<String>,
    pub wall_time_secs: f64,
    pub versions: Versions,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn versions() -> Versions {
    Versions {
        dwl: env!("CARGO_PKG_VERSION"),
        checkpoint_format: dwl::checkpoint::CHECKPOINT_FORMAT,
    }
}

pub fn digest_file(path: &Path) -> Result<InputDigest> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(InputDigest {
        path: path.to_path_buf(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("writing {}", path.display()))?;
    tmp.write_all(bytes).with_context(|| format!("writing {}", path.display()))?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

impl RunManifest {
    pub fn write(&self, out: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(&out.join(MANIFEST_FILE), text.as_bytes())
    }
}
