//! Sidecar files recording which config produced an artifact and the
//! content hashes of its inputs.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{PipelineError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub stage: String,
    pub config_hash: String,
    pub sha256: String,
    /// Input file name to its content hash at write time.
    pub inputs: BTreeMap<String, String>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(|e| PipelineError::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| PipelineError::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Hashes `path` and its inputs and writes `<path>.meta.json`. Inputs are
/// keyed by file name so sidecars do not depend on the output directory.
pub fn write_sidecar(path: &Path, stage: &str, config_hash: &str, inputs: &[&Path]) -> Result<()> {
    let mut ins = BTreeMap::new();
    for p in inputs {
        ins.insert(file_name(p), file_sha256(p)?);
    }
    let meta = Sidecar {
        stage: stage.to_string(),
        config_hash: config_hash.to_string(),
        sha256: file_sha256(path)?,
        inputs: ins,
    };
    let sp = sidecar_path(path);
    let mut text = serde_json::to_string_pretty(&meta).map_err(|e| PipelineError::io(&sp, e))?;
    text.push('\n');
    std::fs::write(&sp, text).map_err(|e| PipelineError::io(&sp, e))
}

pub fn read_sidecar(path: &Path) -> Result<Option<Sidecar>> {
    let sp = sidecar_path(path);
    if !sp.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&sp).map_err(|e| PipelineError::io(&sp, e))?;
    serde_json::from_str(&text).map(Some).map_err(|e| PipelineError::io(&sp, e))
}

/// Fails when `path` has a sidecar whose recorded hash no longer matches the
/// file, i.e. the file was changed after the stage that wrote it. Files
/// without a sidecar pass. Returns the sidecar if any.
pub fn verify_input(path: &Path) -> Result<Option<Sidecar>> {
    let Some(meta) = read_sidecar(path)? else {
        return Ok(None);
    };
    let found = file_sha256(path)?;
    if found != meta.sha256 {
        return Err(PipelineError::StaleInput {
            path: path.display().to_string(),
            recorded: meta.sha256,
            found,
        });
    }
    Ok(Some(meta))
}
