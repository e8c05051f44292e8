//! Evaluation metrics: recall, the index memory model and the
//! vectors-times-queries (VQ) efficiency figure.

use std::collections::HashSet;

use crate::config::IndexConfig;
use crate::error::{Error, Result};

/// `|found ∩ truth| / k`.
pub fn recall(found: &[u32], truth: &[u32], k: usize) -> Result<f64> {
    if k == 0 || found.len() != k || truth.len() != k {
        return Err(Error::arg(format!(
            "recall needs k ({k}) > 0 and |found| ({}) == |truth| ({}) == k",
            found.len(),
            truth.len()
        )));
    }
    let truth: HashSet<u32> = truth.iter().copied().collect();
    let hits = found.iter().collect::<HashSet<_>>().into_iter().filter(|id| truth.contains(id)).count();
    Ok(hits as f64 / k as f64)
}

/// Bits needed to address `l` codewords.
pub fn code_bits(l: usize) -> u32 {
    if l <= 1 {
        0
    } else {
        usize::BITS - (l - 1).leading_zeros()
    }
}

/// Preview-index memory in bytes:
/// `N*(M*log2(L)/8 + f) + L*D*f + N_cluster*(D + OutD)*f`,
/// evaluated exactly in bits and rounded up to whole bytes.
pub fn memory_cost(config: &IndexConfig, n: usize, d: usize, f: usize) -> u64 {
    let (n, d, f) = (n as u128, d as u128, f as u128);
    let m = config.m as u128;
    let bits_per_code = m * code_bits(config.l) as u128;
    let per_vector_bits = bits_per_code + 8 * f;
    let codebook = config.l as u128 * d * f;
    let routing = config.n_cluster as u128 * (d + config.out_d as u128) * f;
    let total_bits = n * per_vector_bits + 8 * (codebook + routing);
    total_bits.div_ceil(8) as u64
}

/// Vectors hostable in `machine_memory_bytes` times queries per second.
///
/// `memory_bytes` is the footprint of an index over `n` vectors.
pub fn vq(latency_ms: f64, memory_bytes: u64, machine_memory_bytes: u64, n: usize) -> f64 {
    let vectors = n as f64 * machine_memory_bytes as f64 / memory_bytes as f64;
    vectors * (1000.0 / latency_ms)
}

/// VQ of a subject system relative to a baseline: latency speedup times
/// memory reduction.
pub fn vq_improvement(base_latency_ms: f64, base_memory: f64, latency_ms: f64, memory: f64) -> f64 {
    (base_latency_ms / latency_ms) * (base_memory / memory)
}

/// One evaluation row.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics {
    pub recall: f64,
    pub latency_ms: f64,
    pub t_cs_ms: f64,
    pub t_vs_ms: f64,
    pub t_rerank_ms: f64,
    pub memory_bytes: u64,
    pub vq: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n_cluster: usize, m: usize, l: usize, out_d: usize) -> IndexConfig {
        IndexConfig { n_cluster, m, l, out_d, ..Default::default() }
    }

    #[test]
    fn recall_counts_overlap() {
        let truth: Vec<u32> = (0..10).collect();
        assert_eq!(recall(&truth, &truth, 10).unwrap(), 1.0);
        let disjoint: Vec<u32> = (10..20).collect();
        assert_eq!(recall(&disjoint, &truth, 10).unwrap(), 0.0);
        let partial = [0, 1, 2, 3, 4, 5, 6, 97, 98, 99];
        assert!((recall(&partial, &truth, 10).unwrap() - 0.7).abs() < 1e-12);
        assert!(recall(&partial[..9], &truth, 10).is_err());
    }

    #[test]
    fn memory_cost_reference_point() {
        // 36,000,000 + 131,072 + 11,040,000
        assert_eq!(memory_cost(&cfg(20_000, 32, 256, 10), 1_000_000, 128, 4), 47_171_072);
    }

    #[test]
    fn memory_cost_empty_database() {
        let c = cfg(100, 8, 256, 10);
        assert_eq!(memory_cost(&c, 0, 64, 4), (256 * 64 * 4 + 100 * (64 + 10) * 4) as u64);
    }

    #[test]
    fn memory_cost_fractional_code() {
        // 8 vectors * (1/8 + 4) bytes = 33, codebook 2*4*4 = 32, routing 3*(4+2)*4 = 72
        let c = cfg(3, 1, 2, 2);
        assert_eq!(memory_cost(&c, 8, 4, 4), 33 + 32 + 72);
        // a single vector's 4.125 bytes rounds up
        assert_eq!(memory_cost(&c, 1, 4, 4), 5 + 32 + 72);
    }

    #[test]
    fn vq_improvement_reference_row() {
        let im = vq_improvement(5.4, 40.0, 1.8, 49.0);
        assert!((im - 2.449).abs() < 1e-3, "{im}");
        assert_eq!(vq_improvement(2.0, 10.0, 2.0, 10.0), 1.0);
        assert_eq!(vq_improvement(2.0, 10.0, 1.0, 10.0), 2.0);
    }

    #[test]
    fn vq_matches_definition() {
        // 1000 vectors in 1 MB on a 1 GB machine at 2 ms/query
        let v = vq(2.0, 1 << 20, 1 << 30, 1000);
        assert!((v - 1000.0 * 1024.0 * 500.0).abs() < 1e-6);
        let a = vq(2.0, 100, 1000, 10);
        let b = vq(1.0, 50, 1000, 10);
        assert!((b / a - vq_improvement(2.0, 100.0, 1.0, 50.0)).abs() < 1e-12);
    }

    #[test]
    fn code_bits_powers_of_two() {
        assert_eq!(code_bits(1), 0);
        assert_eq!(code_bits(2), 1);
        assert_eq!(code_bits(256), 8);
        assert_eq!(code_bits(100), 7);
    }
}
