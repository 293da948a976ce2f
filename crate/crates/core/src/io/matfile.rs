//! Binary matrix files: the 8-byte magic `TCMFMAT1`, row and column counts as
//! little-endian `u64`, then the entries row-major as little-endian `f64`.

use std::fs;
use std::path::Path;

use super::{read_bytes, write_atomic};
use crate::error::{Result, TcmfError};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 8] = b"TCMFMAT1";
const HEADER_LEN: usize = 24;

pub fn encode_matrix(m: &Matrix) -> Vec<u8> {
    let (rows, cols) = m.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + rows * cols * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    for r in 0..rows {
        for c in 0..cols {
            out.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
    out
}

/// Decodes a matrix file; `path` only labels errors.
pub fn decode_matrix(bytes: &[u8], path: &Path) -> Result<Matrix> {
    let corrupt = |reason: String| TcmfError::CorruptData {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(format!(
            "file is {} bytes, shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let word = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
    let rows = word(8);
    let cols = word(16);
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER_LEN as u64));
    if expected != Some(bytes.len() as u64) {
        return Err(corrupt(format!(
            "payload length {} does not match a {rows}x{cols} matrix",
            bytes.len() - HEADER_LEN
        )));
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let payload = &bytes[HEADER_LEN..];
    let mut m = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let at = (r * cols + c) * 8;
            let v = f64::from_le_bytes(payload[at..at + 8].try_into().expect("8 bytes"));
            if !v.is_finite() {
                return Err(corrupt(format!("non-finite entry at ({r}, {c})")));
            }
            m[(r, c)] = v;
        }
    }
    Ok(m)
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    write_atomic(path, &encode_matrix(m))
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    decode_matrix(&read_bytes(path)?, path)
}

/// Whether `path` names an existing regular file.
pub fn exists(path: &Path) -> bool {
    fs::metadata(path).map(|m| m.is_file()).unwrap_or(false)
}
