//! Dense matrix interchange: headerless CSV and a little binary format.
//!
//! CSV is the canonical format (comma separated, LF line endings, `.` decimal
//! separator, 17 significant digits so values round-trip bit-exactly). The
//! binary format is magic `OAMP1\0`, little-endian u64 rows and cols, then
//! row-major IEEE f64 payload.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 6] = b"OAMP1\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    Csv,
    Binary,
}

fn validate(m: &Array2<f64>, what: &str) -> Result<()> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(Error::EmptyInput(format!("{what}: zero-sized matrix")));
    }
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::Domain(format!("{what}: non-finite entry")));
    }
    Ok(())
}

/// Load a matrix, sniffing the binary magic and falling back to CSV.
pub fn load_matrix(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() {
        return Err(Error::EmptyInput(path.display().to_string()));
    }
    if bytes.len() >= BINARY_MAGIC.len() && &bytes[..BINARY_MAGIC.len()] == BINARY_MAGIC {
        parse_binary(&bytes)
    } else {
        parse_csv(&bytes)
    }
}

pub fn save_matrix(m: &Array2<f64>, path: &Path, format: MatrixFormat) -> Result<()> {
    validate(m, "save_matrix")?;
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    match format {
        MatrixFormat::Csv => write_csv(m, &mut w),
        MatrixFormat::Binary => write_binary(m, &mut w),
    }
}

fn parse_csv(bytes: &[u8]) -> Result<Array2<f64>> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::Parse { line: 0, msg: "file is not valid UTF-8".into() })?;
    let mut values: Vec<f64> = Vec::new();
    let mut cols = 0usize;
    let mut rows = 0usize;
    for (idx, raw) in text.split('\n').enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.is_empty() {
            continue;
        }
        let mut count = 0usize;
        for tok in line.split(',') {
            let v: f64 = tok.trim().parse().map_err(|_| Error::Parse {
                line: idx + 1,
                msg: format!("non-numeric token {tok:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("non-finite value {tok:?}"),
                });
            }
            values.push(v);
            count += 1;
        }
        if rows == 0 {
            cols = count;
        } else if count != cols {
            return Err(Error::Parse {
                line: idx + 1,
                msg: format!("ragged row: expected {cols} fields, found {count}"),
            });
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::EmptyInput("csv has no data rows".into()));
    }
    Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| Error::Parse { line: 0, msg: e.to_string() })
}

fn write_csv(m: &Array2<f64>, w: &mut impl Write) -> Result<()> {
    for row in m.rows() {
        let mut first = true;
        for v in row.iter() {
            if !first {
                w.write_all(b",")?;
            }
            write!(w, "{v:.16e}")?;
            first = false;
        }
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn parse_binary(bytes: &[u8]) -> Result<Array2<f64>> {
    let header = BINARY_MAGIC.len() + 16;
    if bytes.len() < header {
        return Err(Error::Parse { line: 0, msg: "binary header truncated".into() });
    }
    let rows = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[14..22].try_into().unwrap()) as usize;
    let want = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Parse { line: 0, msg: "binary shape overflow".into() })?;
    let payload = &bytes[header..];
    if payload.len() != want {
        return Err(Error::Parse {
            line: 0,
            msg: format!("binary payload is {} bytes, expected {want}", payload.len()),
        });
    }
    let mut values = Vec::with_capacity(rows * cols);
    for chunk in payload.chunks_exact(8) {
        let v = f64::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Parse { line: 0, msg: "non-finite value in binary payload".into() });
        }
        values.push(v);
    }
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyInput("binary matrix has zero extent".into()));
    }
    Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| Error::Parse { line: 0, msg: e.to_string() })
}

fn write_binary(m: &Array2<f64>, w: &mut impl Write) -> Result<()> {
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for v in m.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}
