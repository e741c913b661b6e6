//! File plumbing shared by the caches, checkpoints and CLI outputs.
//!
//! Binary containers are laid out as
//! `b"SPMX" | u32 version | u64 header length | JSON header | f64 payload (LE)`.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SPMX";
const CONTAINER_VERSION: u32 = 1;

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file_name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("out");
    let tmp = path.with_file_name(format!(".{file_name}.{}.tmp", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_container<H: Serialize>(path: &Path, header: &H, payload: &[f64]) -> Result<()> {
    let header = serde_json::to_vec(header)?;
    let mut buf = Vec::with_capacity(16 + header.len() + 8 * payload.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &buf)
}

pub fn read_container<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<f64>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::InvalidData(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a container file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(bad(&format!("unsupported container version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() < hlen || (body.len() - hlen) % 8 != 0 {
        return Err(bad("truncated container"));
    }
    let header = serde_json::from_slice(&body[..hlen])?;
    let payload = body[hlen..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, payload))
}

pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut s = String::with_capacity(m.len() * 20);
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if c > 0 {
                s.push(',');
            }
            let _ = write!(s, "{}", m[(r, c)]);
        }
        s.push('\n');
    }
    s
}

pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_atomic(path, matrix_to_csv(m).as_bytes())
}

/// Reads a headerless numeric CSV. All rows must have the same number of columns.
pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix_csv(&text, path)
}

pub fn parse_matrix_csv(text: &str, path: &Path) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|t| {
                let t = t.trim();
                t.parse::<f64>().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("non-numeric token '{t}'"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected {} columns, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, |r| r.len());
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}
