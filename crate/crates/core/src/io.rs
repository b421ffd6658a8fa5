//! Tensor file exchange.
//!
//! The TATN binary layout is: magic bytes `54 41 54 4E`, a u8 rank, rank
//! little-endian u32 extents, then the row-major payload as little-endian
//! f32. Values round-trip through f32, so writing is lossy for doubles;
//! readers get back exactly the f32 the writer stored. A loose CSV reader
//! is provided for matrices dumped by other tools: one row per line, `,`
//! separated, `#`-prefixed comment lines skipped.

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: [u8; 4] = [0x54, 0x41, 0x54, 0x4e];

/// Serialize into the TATN byte layout.
pub fn to_tatn_bytes(t: &DenseTensor) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} exceeds format limit", t.rank())));
    }
    for &e in t.shape() {
        if e > u32::MAX as usize {
            return Err(Error::Format(format!("extent {e} exceeds u32")));
        }
    }
    let mut out = Vec::with_capacity(5 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(&MAGIC);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parse the TATN byte layout.
pub fn from_tatn_bytes(bytes: &[u8]) -> Result<DenseTensor> {
    if bytes.len() < 5 || bytes[..4] != MAGIC {
        return Err(Error::Format("missing TATN magic".into()));
    }
    let rank = bytes[4] as usize;
    let header = 5 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Format("truncated TATN extent table".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 5 + 4 * i;
        let e = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        shape.push(e as usize);
    }
    let count: usize = shape.iter().product();
    let expected = header + 4 * count;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes, shape {:?} needs {}",
            bytes.len() - header,
            shape,
            4 * count
        )));
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let off = header + 4 * i;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Format(format!("non-finite value at index {i}")));
        }
        data.push(v as f64);
    }
    DenseTensor::new(shape, data)
}

/// Write a tensor to a TATN file.
pub fn write_tatn(path: &Path, t: &DenseTensor) -> Result<()> {
    let bytes = to_tatn_bytes(t)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Read a tensor from a TATN file.
pub fn read_tatn(path: &Path) -> Result<DenseTensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_tatn_bytes(&bytes)
}

/// Parse a matrix from CSV text: numeric rows, equal lengths, `#` comments
/// and blank lines skipped.
pub fn matrix_from_csv(text: &str) -> Result<DenseTensor> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f64>().map_err(|_| {
                    Error::Parse(format!("line {}: bad number {cell:?}", lineno + 1))
                })
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Parse(format!(
                    "line {}: {} cells, expected {}",
                    lineno + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse("no data rows".into()));
    }
    let (p, q) = (rows.len(), rows[0].len());
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    DenseTensor::new(vec![p, q], data)
}

/// Read a matrix file by extension: `.tatn` binary (must be rank 2), else CSV.
pub fn read_matrix(path: &Path) -> Result<DenseTensor> {
    let is_tatn = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("tatn"))
        .unwrap_or(false);
    if is_tatn {
        let t = read_tatn(path)?;
        if t.rank() != 2 {
            return Err(Error::Format(format!(
                "expected a matrix, file holds rank {}",
                t.rank()
            )));
        }
        Ok(t)
    } else {
        let text = std::fs::read_to_string(path)?;
        matrix_from_csv(&text)
    }
}
