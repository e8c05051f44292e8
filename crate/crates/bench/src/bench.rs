//! Grid benchmarks over a built index.

use std::collections::HashSet;
use std::time::Instant;

use anyhow::{ensure, Result};
use mvann::{vq, MultiViewIndex, QueryResult, SearchParams, VectorDataset};

use crate::report::{BenchReport, BenchRow, Mode};
use crate::truth::GroundTruth;

/// Memory budget of the reference machine used for VQ.
pub const DEFAULT_MACHINE_MEMORY: u64 = 64 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchOptions {
    /// Also measure preview-only rows at each grid point.
    pub include_preview: bool,
    /// Worker threads issuing queries; 1 measures single-query latency.
    pub threads: usize,
    pub machine_memory_bytes: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { include_preview: false, threads: 1, machine_memory_bytes: DEFAULT_MACHINE_MEMORY }
    }
}

/// `|found ∩ truth| / k`; `found` may be shorter than `k`.
pub fn recall_at(found: &[u32], truth: &[u32], k: usize) -> f64 {
    let truth: HashSet<u32> = truth.iter().copied().collect();
    let hits = found.iter().copied().collect::<HashSet<_>>().intersection(&truth).count();
    hits as f64 / k as f64
}

/// Nearest-rank percentile of an unsorted sample.
pub fn percentile(xs: &[f64], p: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank - 1]
}

struct Sample {
    latency_ms: f64,
    result: QueryResult,
}

fn run_pass(
    index: &MultiViewIndex,
    queries: &VectorDataset,
    params: &SearchParams,
    mode: Mode,
    threads: usize,
) -> Result<(Vec<Sample>, f64)> {
    let one = |q: &[f32]| -> Result<Sample> {
        let t = Instant::now();
        let result = match mode {
            Mode::Full => index.search(q, params)?,
            Mode::Preview => index.search_preview(q, params)?,
        };
        Ok(Sample { latency_ms: t.elapsed().as_secs_f64() * 1e3, result })
    };
    let wall = Instant::now();
    let samples = if threads <= 1 {
        queries.rows().map(one).collect::<Result<Vec<_>>>()?
    } else {
        let nq = queries.n();
        let mut slots: Vec<Option<Sample>> = (0..nq).map(|_| None).collect();
        std::thread::scope(|s| -> Result<()> {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let one = &one;
                    s.spawn(move || {
                        (t..nq).step_by(threads).map(|i| one(queries.row(i)).map(|x| (i, x))).collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, sample) in h.join().expect("benchmark worker panicked")? {
                    slots[i] = Some(sample);
                }
            }
            Ok(())
        })?;
        slots.into_iter().map(|s| s.expect("every query measured")).collect()
    };
    Ok((samples, wall.elapsed().as_secs_f64()))
}

/// Measures every grid point: one untimed warm-up pass over all queries,
/// then a timed pass whose per-query latencies and stage times are averaged.
pub fn cmd_bench(
    index: &MultiViewIndex,
    queries: &VectorDataset,
    truth: &GroundTruth,
    grid: &[SearchParams],
    options: &BenchOptions,
) -> Result<BenchReport> {
    ensure!(queries.d() == index.d(), "query dimension {} differs from index dimension {}", queries.d(), index.d());
    ensure!(truth.len() == queries.n(), "truth has {} rows for {} queries", truth.len(), queries.n());
    let modes: &[Mode] = if options.include_preview { &[Mode::Full, Mode::Preview] } else { &[Mode::Full] };
    let memory_bytes = index.memory_bytes();
    let mut report = BenchReport::default();
    for params in grid {
        ensure!(params.k <= truth.k(), "k={} exceeds the truth file's k={}", params.k, truth.k());
        for &mode in modes {
            run_pass(index, queries, params, mode, options.threads)?;
            let (samples, wall_s) = run_pass(index, queries, params, mode, options.threads)?;
            let nq = samples.len() as f64;
            let lat: Vec<f64> = samples.iter().map(|s| s.latency_ms).collect();
            let mean = |f: &dyn Fn(&Sample) -> f64| samples.iter().map(f).sum::<f64>() / nq;
            let recall = samples
                .iter()
                .enumerate()
                .map(|(q, s)| {
                    let ids: Vec<u32> = s.result.neighbors.iter().map(|n| n.id).collect();
                    recall_at(&ids, &truth.ids(q, params.k), params.k)
                })
                .sum::<f64>()
                / nq;
            let latency_ms_mean = lat.iter().sum::<f64>() / nq;
            report.rows.push(BenchRow {
                params: *params,
                mode,
                recall,
                latency_ms_mean,
                latency_ms_p99: percentile(&lat, 99.0),
                t_cs_ms: mean(&|s| s.result.timings.cs_us / 1e3),
                t_vs_ms: mean(&|s| s.result.timings.vs_us / 1e3),
                t_rerank_ms: mean(&|s| s.result.timings.rerank_us / 1e3),
                memory_bytes,
                vq: vq(latency_ms_mean, memory_bytes, options.machine_memory_bytes, index.n()),
                qps: nq / wall_s,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recall_counts_overlap() {
        assert_eq!(recall_at(&[1, 2, 3], &[3, 2, 1], 3), 1.0);
        assert_eq!(recall_at(&[1], &[2, 1], 2), 0.5);
        assert_eq!(recall_at(&[], &[1], 1), 0.0);
    }

    #[test]
    fn nearest_rank_percentile() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&xs, 99.0), 99.0);
        assert_eq!(percentile(&xs, 100.0), 100.0);
        assert_eq!(percentile(&[5.0], 99.0), 5.0);
    }
}
