//! Texmex vector files: repeated `[i32 d][d components]` records.
//!
//! `fvecs` components are `f32`, `bvecs` are `u8`, `ivecs` are `i32`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vectors::VectorSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VecFormat {
    Fvecs,
    Bvecs,
    Ivecs,
}

impl VecFormat {
    pub fn elem_bytes(self) -> usize {
        match self {
            VecFormat::Fvecs | VecFormat::Ivecs => 4,
            VecFormat::Bvecs => 1,
        }
    }

    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Option<VecFormat> {
        match path.extension()?.to_str()? {
            "fvecs" => Some(VecFormat::Fvecs),
            "bvecs" => Some(VecFormat::Bvecs),
            "ivecs" => Some(VecFormat::Ivecs),
            _ => None,
        }
    }
}

impl std::str::FromStr for VecFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fvecs" => Ok(VecFormat::Fvecs),
            "bvecs" => Ok(VecFormat::Bvecs),
            "ivecs" => Ok(VecFormat::Ivecs),
            other => Err(Error::usage(format!("unknown vector format {other:?}"))),
        }
    }
}

pub(crate) fn record_dim(bytes: &[u8], at: usize) -> Result<usize> {
    let raw = bytes
        .get(at..at + 4)
        .ok_or_else(|| Error::format(format!("truncated record header at byte {at}")))?;
    let d = i32::from_le_bytes(raw.try_into().unwrap());
    if d <= 0 {
        return Err(Error::format(format!("non-positive dimension {d} at byte {at}")));
    }
    Ok(d as usize)
}

/// Splits a record file into `(dim, component bytes per record)`.
fn records(bytes: &[u8], elem: usize) -> Result<(usize, Vec<&[u8]>)> {
    if bytes.is_empty() {
        return Ok((0, Vec::new()));
    }
    let dim = record_dim(bytes, 0)?;
    let stride = 4 + dim * elem;
    if !bytes.len().is_multiple_of(stride) {
        return Err(Error::format(format!(
            "file size {} is not a multiple of record size {stride}",
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(bytes.len() / stride);
    for (i, rec) in bytes.chunks_exact(stride).enumerate() {
        let d = record_dim(rec, 0)?;
        if d != dim {
            return Err(Error::format(format!("record {i} has dimension {d}, expected {dim}")));
        }
        out.push(&rec[4..]);
    }
    Ok((dim, out))
}

/// Loads a vector file. `fvecs` into an `f32` set is file-mapped; everything
/// else is decoded into resident memory.
pub fn ingest<S: Scalar>(path: impl AsRef<Path>, format: VecFormat) -> Result<VectorSet<S>> {
    let path = path.as_ref();
    if format == VecFormat::Fvecs {
        if let Some(set) = VectorSet::<S>::map_records(path, 4)? {
            return Ok(set);
        }
    }
    let bytes = std::fs::read(path)?;
    let (dim, recs) = records(&bytes, format.elem_bytes())?;
    let mut data = Vec::with_capacity(recs.len() * dim);
    for rec in recs {
        match format {
            VecFormat::Fvecs => data.extend(
                rec.chunks_exact(4)
                    .map(|c| S::from_f32(f32::from_le_bytes(c.try_into().unwrap())).unwrap()),
            ),
            VecFormat::Bvecs => data.extend(rec.iter().map(|&b| S::from_u8(b).unwrap())),
            VecFormat::Ivecs => data.extend(
                rec.chunks_exact(4)
                    .map(|c| S::from_i32(i32::from_le_bytes(c.try_into().unwrap())).unwrap()),
            ),
        }
    }
    VectorSet::from_flat(dim, data)
}

/// Reads an ivecs file as integer rows (ground-truth ids).
pub fn read_ivecs(path: impl AsRef<Path>) -> Result<Vec<Vec<i32>>> {
    let bytes = std::fs::read(path)?;
    let (_, recs) = records(&bytes, 4)?;
    Ok(recs
        .into_iter()
        .map(|rec| {
            rec.chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        })
        .collect())
}

fn write_records<T: Copy>(
    path: &Path,
    rows: impl Iterator<Item = Vec<T>>,
    put: impl Fn(T, &mut Vec<u8>),
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let mut buf = Vec::new();
    for row in rows {
        buf.clear();
        buf.extend_from_slice(&(row.len() as i32).to_le_bytes());
        for v in row {
            put(v, &mut buf);
        }
        out.write_all(&buf)?;
    }
    out.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    Ok(())
}

pub fn write_fvecs<S: Scalar>(path: impl AsRef<Path>, set: &VectorSet<S>) -> Result<()> {
    write_records(path.as_ref(), set.rows().map(|r| r.to_vec()), |v: S, buf| {
        buf.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes())
    })
}

/// Writes components as bytes; values must already be integral in `0..=255`.
pub fn write_bvecs<S: Scalar>(path: impl AsRef<Path>, set: &VectorSet<S>) -> Result<()> {
    for (i, v) in set.rows().flatten().enumerate() {
        if v.to_u8().map(|b| S::from_u8(b).unwrap()) != Some(*v) {
            return Err(Error::usage(format!("element {i} is not a byte value: {v}")));
        }
    }
    write_records(path.as_ref(), set.rows().map(|r| r.to_vec()), |v: S, buf| {
        buf.push(v.to_u8().unwrap())
    })
}

pub fn write_ivecs(path: impl AsRef<Path>, rows: &[Vec<i32>]) -> Result<()> {
    write_records(path.as_ref(), rows.iter().cloned(), |v: i32, buf| {
        buf.extend_from_slice(&v.to_le_bytes())
    })
}
