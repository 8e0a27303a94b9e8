//! Matrix file format shared by every stage.
//!
//! Two encodings are accepted:
//!
//! * CSV: one row per line, `.` as decimal separator, no header.
//! * Binary: the magic bytes `MOM1`, then `rows` and `cols` as little-endian
//!   `u64`, then `rows * cols` little-endian IEEE-754 doubles in row-major order.
//!
//! Readers detect the encoding from the magic bytes, so the file extension is
//! informational only (`.csv` / `.mat`).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MOM1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixFormat {
    #[default]
    Csv,
    Bin,
}

impl MatrixFormat {
    pub fn extension(self) -> &'static str {
        match self {
            MatrixFormat::Csv => "csv",
            MatrixFormat::Bin => "mat",
        }
    }

    /// `dir/stem.ext` for this format.
    pub fn path_in(self, dir: &Path, stem: &str) -> PathBuf {
        dir.join(format!("{stem}.{}", self.extension()))
    }
}

impl std::str::FromStr for MatrixFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(MatrixFormat::Csv),
            "bin" | "mat" => Ok(MatrixFormat::Bin),
            other => Err(Error::Config(format!("unknown matrix format {other:?}"))),
        }
    }
}

pub fn encode_binary(m: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 8 * m.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    out
}

pub fn decode_binary(bytes: &[u8]) -> Result<DMatrix<f64>> {
    if bytes.len() < 20 || &bytes[..4] != MAGIC {
        return Err(Error::Data("missing MOM1 header".into()));
    }
    let rows = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let cols = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(8))
        .and_then(|c| c.checked_add(20))
        .ok_or_else(|| Error::Data("matrix dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "binary matrix {rows}x{cols} needs {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes[20..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

/// CSV encoding. `f64`'s `Display` is the shortest round-tripping form, so
/// decoding reproduces every value bit for bit.
pub fn encode_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&m[(i, j)].to_string());
        }
        out.push('\n');
    }
    out
}

pub fn decode_csv(text: &str) -> Result<DMatrix<f64>> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Data(format!("line {}: cannot parse {field:?}", lineno + 1))
            })?;
            data.push(v);
        }
        let width = data.len() - before;
        match cols {
            None => cols = Some(width),
            Some(c) if c != width => {
                return Err(Error::Data(format!(
                    "line {}: expected {c} columns, found {width}",
                    lineno + 1
                )))
            }
            _ => {}
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, cols.unwrap_or(0), &data))
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>, format: MatrixFormat) -> Result<()> {
    let bytes = match format {
        MatrixFormat::Csv => encode_csv(m).into_bytes(),
        MatrixFormat::Bin => encode_binary(m),
    };
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(MAGIC) {
        decode_binary(&bytes)
    } else {
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Data(format!("{} is neither MOM1 nor UTF-8 CSV", path.display())))?;
        decode_csv(&text)
    }
}

/// Finds `dir/stem.csv` or `dir/stem.mat`, whichever exists.
pub fn find_matrix(dir: &Path, stem: &str) -> Result<PathBuf> {
    for fmt in [MatrixFormat::Csv, MatrixFormat::Bin] {
        let p = fmt.path_in(dir, stem);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("no {stem}.csv or {stem}.mat in {}", dir.display()),
    )))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
