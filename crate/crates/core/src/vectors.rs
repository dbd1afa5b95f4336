//! The dataset: `count` vectors of `dim` elements with stable ids.

use std::collections::HashMap;
use std::path::Path;

use memmap2::Mmap;

use crate::error::{Error, Result};
use crate::metric::norm;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backing {
    Resident,
    FileMapped,
}

enum Storage<S> {
    Resident(Vec<S>),
    /// Row `i` lives at `offset + i * stride` in the mapping.
    Mapped {
        map: Mmap,
        offset: usize,
        stride: usize,
    },
}

pub struct VectorSet<S: Scalar> {
    dim: usize,
    count: usize,
    storage: Storage<S>,
    /// `None` means ids are `0..count`.
    ids: Option<Vec<u64>>,
    positions: Option<HashMap<u64, usize>>,
    norms: Vec<S>,
}

impl<S: Scalar> std::fmt::Debug for VectorSet<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VectorSet")
            .field("dim", &self.dim)
            .field("count", &self.count)
            .field("backing", &self.backing())
            .finish()
    }
}

fn check_finite<S: Scalar>(data: &[S]) -> Result<()> {
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::domain(format!("non-finite value at element {pos}")));
    }
    Ok(())
}

impl<S: Scalar> VectorSet<S> {
    /// Row-major `data`, ids `0..count`.
    pub fn from_flat(dim: usize, data: Vec<S>) -> Result<Self> {
        if dim == 0 {
            if data.is_empty() {
                return Ok(Self::empty());
            }
            return Err(Error::usage("dimension must be positive"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::usage(format!(
                "data length {} is not a multiple of dim {dim}",
                data.len()
            )));
        }
        check_finite(&data)?;
        let count = data.len() / dim;
        let norms = data.chunks_exact(dim).map(norm).collect();
        Ok(VectorSet {
            dim,
            count,
            storage: Storage::Resident(data),
            ids: None,
            positions: None,
            norms,
        })
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::usage("rows have inconsistent dimensions"));
        }
        Self::from_flat(dim, rows.concat())
    }

    pub fn empty() -> Self {
        VectorSet {
            dim: 0,
            count: 0,
            storage: Storage::Resident(Vec::new()),
            ids: None,
            positions: None,
            norms: Vec::new(),
        }
    }

    /// Replaces the default `0..count` ids.
    pub fn with_ids(mut self, ids: Vec<u64>) -> Result<Self> {
        if ids.len() != self.count {
            return Err(Error::usage(format!(
                "{} ids supplied for {} vectors",
                ids.len(),
                self.count
            )));
        }
        let mut positions = HashMap::with_capacity(ids.len());
        for (pos, &id) in ids.iter().enumerate() {
            if positions.insert(id, pos).is_some() {
                return Err(Error::usage(format!("duplicate id {id}")));
            }
        }
        self.ids = Some(ids);
        self.positions = Some(positions);
        Ok(self)
    }

    /// Maps a dimension-prefixed record file (fvecs layout when `S` is `f32`)
    /// without copying the payload. Falls back to resident storage when the
    /// element width or host byte order does not match the file.
    pub(crate) fn map_records(path: &Path, file_elem_bytes: usize) -> Result<Option<Self>> {
        if file_elem_bytes != S::BYTES || cfg!(target_endian = "big") {
            return Ok(None);
        }
        let file = std::fs::File::open(path)?;
        // SAFETY: the mapping is read-only and the file is treated as immutable
        // for the lifetime of the set.
        let map = unsafe { Mmap::map(&file)? };
        if map.is_empty() {
            return Ok(Some(Self::empty()));
        }
        let dim = crate::texmex::record_dim(&map, 0)?;
        let stride = 4 + dim * S::BYTES;
        if map.len() % stride != 0 {
            return Err(Error::format(format!(
                "file size {} is not a multiple of record size {stride}",
                map.len()
            )));
        }
        let count = map.len() / stride;
        let mut norms = Vec::with_capacity(count);
        for i in 0..count {
            let d = crate::texmex::record_dim(&map, i * stride)?;
            if d != dim {
                return Err(Error::format(format!("record {i} has dimension {d}, expected {dim}")));
            }
            let start = i * stride + 4;
            let row: &[S] = bytemuck::try_cast_slice(&map[start..start + dim * S::BYTES])
                .map_err(|e| Error::format(format!("unaligned record {i}: {e:?}")))?;
            check_finite(row).map_err(|e| Error::domain(format!("record {i}: {e}")))?;
            norms.push(norm(row));
        }
        Ok(Some(VectorSet {
            dim,
            count,
            storage: Storage::Mapped { map, offset: 4, stride },
            ids: None,
            positions: None,
            norms,
        }))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn backing(&self) -> Backing {
        match self.storage {
            Storage::Resident(_) => Backing::Resident,
            Storage::Mapped { .. } => Backing::FileMapped,
        }
    }

    /// Row at `pos` (positional, not by id).
    #[inline]
    pub fn row(&self, pos: usize) -> &[S] {
        match &self.storage {
            Storage::Resident(data) => &data[pos * self.dim..(pos + 1) * self.dim],
            Storage::Mapped { map, offset, stride } => {
                let start = pos * stride + offset;
                bytemuck::cast_slice(&map[start..start + self.dim * S::BYTES])
            }
        }
    }

    #[inline]
    pub fn row_norm(&self, pos: usize) -> S {
        self.norms[pos]
    }

    #[inline]
    pub fn id(&self, pos: usize) -> u64 {
        match &self.ids {
            Some(ids) => ids[pos],
            None => pos as u64,
        }
    }

    pub fn position(&self, id: u64) -> Option<usize> {
        match &self.positions {
            Some(map) => map.get(&id).copied(),
            None => (id < self.count as u64).then_some(id as usize),
        }
    }

    pub fn vector(&self, id: u64) -> Option<&[S]> {
        self.position(id).map(|p| self.row(p))
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.count).map(move |p| self.id(p))
    }

    pub fn rows(&self) -> impl Iterator<Item = &[S]> + '_ {
        (0..self.count).map(move |p| self.row(p))
    }

    /// Copies the rows into one row-major buffer.
    pub fn to_flat(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.count * self.dim);
        for row in self.rows() {
            out.extend_from_slice(row);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite() {
        let err = VectorSet::from_flat(2, vec![1.0f32, f32::NAN]).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
        let err = VectorSet::from_flat(1, vec![f64::INFINITY]).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn rejects_ragged_data() {
        assert!(matches!(VectorSet::from_flat(3, vec![0.0f32; 7]), Err(Error::Usage(_))));
    }

    #[test]
    fn custom_ids_are_unique_and_indexed() {
        let set = VectorSet::from_flat(1, vec![1.0f32, 2.0, 3.0])
            .unwrap()
            .with_ids(vec![10, 20, 30])
            .unwrap();
        assert_eq!(set.vector(20), Some(&[2.0f32][..]));
        assert_eq!(set.position(40), None);
        let dup = VectorSet::from_flat(1, vec![1.0f32, 2.0]).unwrap().with_ids(vec![5, 5]);
        assert!(matches!(dup, Err(Error::Usage(_))));
    }

    #[test]
    fn norms_cached_at_ingest() {
        let set = VectorSet::from_flat(2, vec![3.0f32, 4.0, 0.0, 0.0]).unwrap();
        assert_eq!(set.row_norm(0), 5.0);
        assert_eq!(set.row_norm(1), 0.0);
    }
}
