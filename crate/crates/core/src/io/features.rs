//! Binary patch-feature files and their companion coordinate files.
//!
//! Feature file: magic `BXF1`, then unsigned 32-bit little-endian `n` and
//! `d`, then `n * d` little-endian 64-bit floats, row-major. The coords file
//! is delimited text, one `x,y` row per feature row.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"BXF1";

pub fn write_feature_file(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    let mut buf = Vec::with_capacity(12 + n * d * 8);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for row in rows {
        if row.len() != d {
            return Err(Error::Format("ragged feature rows".into()));
        }
        for v in row {
            if !v.is_finite() {
                return Err(Error::Domain(format!("non-finite feature value {v}")));
            }
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_feature_file(path: &Path) -> Result<Vec<Vec<f64>>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..4] != FEATURE_MAGIC {
        return Err(Error::Format(format!(
            "{} is not a feature file",
            path.display()
        )));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expect = 12 + n * d * 8;
    if bytes.len() != expect {
        return Err(Error::Format(format!(
            "{}: payload is {} bytes, header implies {expect}",
            path.display(),
            bytes.len()
        )));
    }
    let mut rows = Vec::with_capacity(n);
    let mut off = 12;
    for _ in 0..n {
        let mut row = Vec::with_capacity(d);
        for _ in 0..d {
            let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::Domain(format!(
                    "{}: non-finite feature value",
                    path.display()
                )));
            }
            row.push(v);
            off += 8;
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_coords_file(path: &Path, coords: &[(f64, f64)]) -> Result<()> {
    let mut out = String::new();
    for (x, y) in coords {
        out.push_str(&format!("{x},{y}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_coords_file(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = fs::read_to_string(path)?;
    let mut coords = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (x, y) = line.split_once(',').ok_or_else(|| {
            Error::Format(format!("{}:{}: expected x,y", path.display(), lineno + 1))
        })?;
        let parse = |s: &str| {
            s.trim().parse::<f64>().map_err(|_| {
                Error::Format(format!(
                    "{}:{}: bad coordinate {s:?}",
                    path.display(),
                    lineno + 1
                ))
            })
        };
        coords.push((parse(x)?, parse(y)?));
    }
    Ok(coords)
}
