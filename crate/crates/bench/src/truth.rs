//! Exact ground truth and its binary file.
//!
//! Layout (little-endian): magic `ZGT1`, `u64` query count, `u64` k, then
//! per query `k` records of (`u32` id, `f32` squared distance), ascending.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use mvann::{exact_topk, Neighbor, VectorDataset};

pub const MAGIC: [u8; 4] = *b"ZGT1";

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    k: usize,
    rows: Vec<Vec<Neighbor>>,
}

impl GroundTruth {
    /// Exact top-`k` of every query against `base`.
    pub fn compute(base: &VectorDataset, queries: &VectorDataset, k: usize) -> Result<Self> {
        ensure!(
            base.d() == queries.d(),
            "dataset dimension {} differs from query dimension {}",
            base.d(),
            queries.d()
        );
        let rows = queries.rows().map(|q| exact_topk(base, q, k)).collect::<mvann::Result<_>>()?;
        Ok(Self { k, rows })
    }

    pub fn from_rows(k: usize, rows: Vec<Vec<Neighbor>>) -> Result<Self> {
        ensure!(rows.iter().all(|r| r.len() == k), "every truth row needs exactly k={k} entries");
        Ok(Self { k, rows })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, q: usize) -> &[Neighbor] {
        &self.rows[q]
    }

    /// Ids of the first `k` true neighbors of query `q`.
    pub fn ids(&self, q: usize, k: usize) -> Vec<u32> {
        self.rows[q][..k].iter().map(|n| n.id).collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        w.write_all(&MAGIC)?;
        w.write_all(&(self.rows.len() as u64).to_le_bytes())?;
        w.write_all(&(self.k as u64).to_le_bytes())?;
        for row in &self.rows {
            for n in row {
                w.write_all(&n.id.to_le_bytes())?;
                w.write_all(&n.dist.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)
            .with_context(|| format!("opening truth file {}", path.display()))?
            .read_to_end(&mut bytes)?;
        if bytes.len() < 20 || bytes[..4] != MAGIC {
            bail!("{} is not a ground-truth file", path.display());
        }
        let nq = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let k = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        ensure!(
            nq.checked_mul(k).and_then(|x| x.checked_mul(8)) == Some(body.len()),
            "truth file {} promises {nq}x{k} records but holds {} bytes",
            path.display(),
            body.len()
        );
        let mut records = body.chunks_exact(8).map(|r| Neighbor {
            id: u32::from_le_bytes(r[0..4].try_into().unwrap()),
            dist: f32::from_le_bytes(r[4..8].try_into().unwrap()),
        });
        let rows = (0..nq).map(|_| records.by_ref().take(k).collect()).collect();
        Ok(Self { k, rows })
    }
}

/// Computes the exact top-`k` for every query and writes it to `out`.
pub fn cmd_oracle(
    base: &VectorDataset,
    queries: &VectorDataset,
    k: usize,
    out: impl AsRef<Path>,
) -> Result<GroundTruth> {
    let truth = GroundTruth::compute(base, queries, k)?;
    truth.write(out)?;
    Ok(truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_self_match() {
        let base = mvann::generate_synthetic(200, 6, 4, 1).unwrap();
        let queries = base.subset(&[3, 9]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let truth = cmd_oracle(&base, &queries, 1, &path).unwrap();
        assert_eq!(truth.row(0), &[Neighbor { id: 3, dist: 0.0 }]);
        assert_eq!(GroundTruth::read(&path).unwrap(), truth);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 20 + 2 * 8);
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(GroundTruth::read(&path).is_err());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let base = mvann::generate_synthetic(20, 6, 2, 1).unwrap();
        let queries = mvann::generate_synthetic(2, 5, 1, 1).unwrap();
        assert!(GroundTruth::compute(&base, &queries, 1).is_err());
    }
}
