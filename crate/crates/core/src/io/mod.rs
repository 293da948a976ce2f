//! File formats: binary matrices, run configuration, trace CSV and dataset
//! directories.

pub mod config;
pub mod dataset;
pub mod matfile;
pub mod trace;

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use crate::error::{Result, TcmfError};

/// Writes to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| TcmfError::io(path, std::io::Error::other("path has no file name")))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp: PathBuf = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| TcmfError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        TcmfError::io(path, e)
    })
}

/// Reads a whole file; a missing file is a missing-input error.
pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => TcmfError::MissingInput(path.display().to_string()),
        _ => TcmfError::io(path, e),
    })
}

pub fn read_text(path: &Path) -> Result<String> {
    let bytes = read_bytes(path)?;
    String::from_utf8(bytes).map_err(|_| TcmfError::CorruptData {
        path: path.to_path_buf(),
        reason: "not valid UTF-8".into(),
    })
}

/// `key=value` lines; blank lines and `#` comments are skipped.
pub(crate) fn parse_key_values(text: &str) -> std::result::Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(format!("line {}: expected key=value", n + 1));
        };
        let key = k.trim();
        if key.is_empty() {
            return Err(format!("line {}: empty key", n + 1));
        }
        out.push((key.to_string(), v.trim().to_string()));
    }
    Ok(out)
}
