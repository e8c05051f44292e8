//! Vector datasets: in-memory layout, TexMex-style file ingestion and a
//! synthetic Gaussian-blob generator.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Bytes per stored scalar. bvecs input is widened to `f32`.
pub const ELEM_BYTES: usize = 4;

/// Half-width of the cube synthetic blob centers are drawn from.
pub const SYNTH_CENTER_RANGE: f32 = 4.0;
/// Per-coordinate standard deviation of synthetic blobs.
pub const SYNTH_BLOB_SIGMA: f32 = 1.0;

/// `n` row-major `d`-dimensional vectors with implicit ids `0..n`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorDataset {
    d: usize,
    data: Vec<f32>,
}

impl VectorDataset {
    /// Wraps row-major data. Rejects empty input, a length that is not a
    /// multiple of `d`, and non-finite scalars.
    pub fn new(d: usize, data: Vec<f32>) -> Result<Self> {
        if d == 0 {
            return Err(Error::arg("dimension must be positive"));
        }
        if data.is_empty() {
            return Err(Error::arg("dataset must contain at least one vector"));
        }
        if !data.len().is_multiple_of(d) {
            return Err(Error::arg(format!(
                "data length {} is not a multiple of d={d}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::arg(format!(
                "non-finite scalar in vector {} at component {}",
                pos / d,
                pos % d
            )));
        }
        Ok(Self { d, data })
    }

    pub fn n(&self) -> usize {
        self.data.len() / self.d
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn elem_bytes(&self) -> usize {
        ELEM_BYTES
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.d)
    }

    /// Copies the listed rows, in order, into a new dataset.
    pub fn subset(&self, ids: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(ids.len() * self.d);
        for &i in ids {
            if i >= self.n() {
                return Err(Error::arg(format!("row {i} out of range (n={})", self.n())));
            }
            data.extend_from_slice(self.row(i));
        }
        Self::new(self.d, data)
    }

    /// Splits off the last `count` rows, returning `(head, tail)`.
    pub fn split_tail(mut self, count: usize) -> Result<(Self, Self)> {
        if count == 0 || count >= self.n() {
            return Err(Error::arg(format!(
                "cannot split {count} rows off a dataset of {}",
                self.n()
            )));
        }
        let tail = self.data.split_off((self.n() - count) * self.d);
        Ok((
            Self { d: self.d, data: self.data },
            Self { d: self.d, data: tail },
        ))
    }
}

/// On-disk vector file formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    /// Per record: `i32` dimension, then that many `f32`.
    Fvecs,
    /// Per record: `i32` dimension, then that many `u8`.
    Bvecs,
    /// Header `n: u64, d: u64`, then `n * d` `f32`.
    RawF32,
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fvecs" => Ok(Self::Fvecs),
            "bvecs" => Ok(Self::Bvecs),
            "raw" | "raw_f32" => Ok(Self::RawF32),
            other => Err(Error::arg(format!("unknown data format '{other}'"))),
        }
    }
}

impl DataFormat {
    /// Guesses the format from a file extension.
    pub fn from_extension(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "fvecs" => Some(Self::Fvecs),
            "bvecs" => Some(Self::Bvecs),
            "raw" | "f32" | "bin" => Some(Self::RawF32),
            _ => None,
        }
    }
}

pub fn load_dataset(path: impl AsRef<Path>, format: DataFormat) -> Result<VectorDataset> {
    let mut bytes = Vec::new();
    File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    parse_dataset(&bytes, format)
}

/// Parses an in-memory file image.
pub fn parse_dataset(bytes: &[u8], format: DataFormat) -> Result<VectorDataset> {
    match format {
        DataFormat::Fvecs => parse_vecs(bytes, 4, |b| f32::from_le_bytes(b.try_into().unwrap())),
        DataFormat::Bvecs => parse_vecs(bytes, 1, |b| b[0] as f32),
        DataFormat::RawF32 => parse_raw(bytes),
    }
}

fn parse_vecs(bytes: &[u8], elem: usize, widen: impl Fn(&[u8]) -> f32) -> Result<VectorDataset> {
    let mut offset = 0usize;
    let mut d = None;
    let mut data = Vec::new();
    while offset < bytes.len() {
        if bytes.len() - offset < 4 {
            return Err(Error::format(offset as u64, "truncated dimension field"));
        }
        let dim = i32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap());
        if dim <= 0 {
            return Err(Error::format(offset as u64, format!("invalid dimension {dim}")));
        }
        let dim = dim as usize;
        match d {
            None => d = Some(dim),
            Some(expected) if expected != dim => {
                return Err(Error::format(
                    offset as u64,
                    format!("record dimension {dim} differs from first record's {expected}"),
                ))
            }
            _ => {}
        }
        let body = offset + 4;
        let end = body + dim * elem;
        if end > bytes.len() {
            return Err(Error::format(
                offset as u64,
                format!("record needs {} bytes, {} remain", 4 + dim * elem, bytes.len() - offset),
            ));
        }
        data.extend(bytes[body..end].chunks_exact(elem).map(&widen));
        offset = end;
    }
    let d = d.ok_or_else(|| Error::format(0, "empty file"))?;
    VectorDataset::new(d, data).map_err(|e| Error::format(0, e.to_string()))
}

fn parse_raw(bytes: &[u8]) -> Result<VectorDataset> {
    if bytes.len() < 16 {
        return Err(Error::format(0, "truncated raw header"));
    }
    let n = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let want = n
        .checked_mul(d)
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| Error::format(0, "header size overflow"))?;
    if bytes.len() - 16 != want {
        return Err(Error::format(
            16,
            format!("header promises {want} payload bytes, file has {}", bytes.len() - 16),
        ));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    VectorDataset::new(d, data).map_err(|e| Error::format(16, e.to_string()))
}

pub fn write_dataset(ds: &VectorDataset, path: impl AsRef<Path>, format: DataFormat) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    match format {
        DataFormat::Fvecs => {
            for row in ds.rows() {
                w.write_all(&(ds.d() as i32).to_le_bytes())?;
                for x in row {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        DataFormat::Bvecs => {
            for row in ds.rows() {
                w.write_all(&(ds.d() as i32).to_le_bytes())?;
                for &x in row {
                    if !(0.0..=255.0).contains(&x) || x.fract() != 0.0 {
                        return Err(Error::arg(format!("{x} is not representable as a byte")));
                    }
                    w.write_all(&[x as u8])?;
                }
            }
        }
        DataFormat::RawF32 => {
            w.write_all(&(ds.n() as u64).to_le_bytes())?;
            w.write_all(&(ds.d() as u64).to_le_bytes())?;
            for x in ds.as_slice() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Isotropic Gaussian blobs: `n_clusters_true` centers uniform in
/// `[-SYNTH_CENTER_RANGE, SYNTH_CENTER_RANGE]^d`, each point drawn around a
/// uniformly chosen center with standard deviation `SYNTH_BLOB_SIGMA`.
pub fn generate_synthetic(n: usize, d: usize, n_clusters_true: usize, seed: u64) -> Result<VectorDataset> {
    if n == 0 || d == 0 || n_clusters_true == 0 {
        return Err(Error::arg("n, d and n_clusters_true must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<f32> = (0..n_clusters_true * d)
        .map(|_| rng.random_range(-SYNTH_CENTER_RANGE..SYNTH_CENTER_RANGE))
        .collect();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let c = rng.random_range(0..n_clusters_true);
        for x in &centers[c * d..(c + 1) * d] {
            let z: f32 = StandardNormal.sample(&mut rng);
            data.push(x + SYNTH_BLOB_SIGMA * z);
        }
    }
    VectorDataset::new(d, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fvecs_bytes(rows: &[&[f32]]) -> Vec<u8> {
        let mut out = Vec::new();
        for r in rows {
            out.extend_from_slice(&(r.len() as i32).to_le_bytes());
            for x in *r {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    #[test]
    fn fvecs_three_records() {
        let bytes = fvecs_bytes(&[&[1.0, 2.0, 3.0, 4.0], &[5.0; 4], &[0.5; 4]]);
        assert_eq!(&bytes[0..4], &[4, 0, 0, 0]);
        let ds = parse_dataset(&bytes, DataFormat::Fvecs).unwrap();
        assert_eq!((ds.n(), ds.d()), (3, 4));
        assert_eq!(ds.row(0), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn bvecs_widens_bytes() {
        let bytes = [2u8, 0, 0, 0, 7, 9];
        let ds = parse_dataset(&bytes, DataFormat::Bvecs).unwrap();
        assert_eq!(ds.row(0), &[7.0, 9.0]);
    }

    #[test]
    fn truncated_record_reports_offset() {
        let mut bytes = fvecs_bytes(&[&[1.0, 2.0], &[3.0, 4.0]]);
        bytes.truncate(bytes.len() - 2);
        match parse_dataset(&bytes, DataFormat::Fvecs) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn inconsistent_dimension_is_rejected() {
        let bytes = fvecs_bytes(&[&[1.0, 2.0], &[3.0, 4.0, 5.0]]);
        assert!(matches!(
            parse_dataset(&bytes, DataFormat::Fvecs),
            Err(Error::Format { offset: 12, .. })
        ));
    }

    #[test]
    fn raw_roundtrip_and_size_check() {
        let ds = VectorDataset::new(3, (0..12).map(|x| x as f32).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.raw");
        write_dataset(&ds, &p, DataFormat::RawF32).unwrap();
        assert_eq!(load_dataset(&p, DataFormat::RawF32).unwrap(), ds);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.pop();
        assert!(parse_dataset(&bytes, DataFormat::RawF32).is_err());
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(VectorDataset::new(2, vec![1.0, f32::NAN]).is_err());
        assert!(VectorDataset::new(2, vec![]).is_err());
        assert!(VectorDataset::new(0, vec![1.0]).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_shaped() {
        let a = generate_synthetic(4, 2, 1, 1).unwrap();
        let b = generate_synthetic(4, 2, 1, 1).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(1000, 16, 10, 7).unwrap();
        assert_eq!((c.n(), c.d()), (1000, 16));
        assert!(c.as_slice().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn split_tail_partitions_rows() {
        let ds = generate_synthetic(10, 3, 2, 3).unwrap();
        let last = ds.row(9).to_vec();
        let (head, tail) = ds.split_tail(4).unwrap();
        assert_eq!((head.n(), tail.n()), (6, 4));
        assert_eq!(tail.row(3), &last[..]);
    }
}
