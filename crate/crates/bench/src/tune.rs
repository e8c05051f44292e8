//! Two-step parameter search under a memory target.
//!
//! Step one enumerates index shapes `(n_cluster, m)` whose modelled memory
//! fits the target: `n_cluster` from `{1, 2, 4, 8} * round(sqrt(n))`, `m`
//! from the divisors of `d`. Step two builds each shape and measures the
//! `(ef_search, nscan, r)` grid, keeping points that reach the recall
//! target and returning the one with the highest VQ. Without a qualifying
//! point the target grows by 25% and the search repeats, at most three
//! times; shapes already measured are not rebuilt.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{ensure, Result};
use mvann::{memory_cost, IndexConfig, IoMode, MultiViewIndex, SearchParams, VectorDataset};

use crate::bench::{cmd_bench, BenchOptions};
use crate::report::{BenchRow, CSV_HEADER};
use crate::truth::GroundTruth;

pub const N_CLUSTER_FACTORS: [usize; 4] = [1, 2, 4, 8];
pub const TUNE_CODEWORDS: usize = 256;
pub const MAX_ESCALATIONS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct TuneSpec {
    /// Memory target in bytes under the analytic model.
    pub memory_target_bytes: u64,
    pub recall_target: f64,
    pub k: usize,
    pub ef_search_grid: Vec<usize>,
    pub nscan_grid: Vec<usize>,
    pub r_grid: Vec<usize>,
    /// Supplies `out_d`, `ef_construction`, `kmeans_iters` and `seed`;
    /// `n_cluster`, `m` and `l` are overridden per candidate.
    pub base_config: IndexConfig,
    pub io_mode: IoMode,
    pub bench: BenchOptions,
}

impl TuneSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..=1.0).contains(&self.recall_target),
            "recall target {} outside [0, 1]",
            self.recall_target
        );
        ensure!(self.k >= 1, "k must be at least 1");
        ensure!(
            !self.ef_search_grid.is_empty() && !self.nscan_grid.is_empty() && !self.r_grid.is_empty(),
            "ef_search, nscan and r grids must be non-empty"
        );
        Ok(())
    }
}

/// One measured grid point of one index shape.
#[derive(Debug, Clone, PartialEq)]
pub struct TuneRow {
    pub config: IndexConfig,
    pub row: BenchRow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneOutcome {
    /// Highest-VQ point meeting the recall target, if any.
    pub chosen: Option<TuneRow>,
    /// Highest-recall point seen; reported when nothing qualifies.
    pub best: Option<TuneRow>,
    /// Every measured point, in measurement order.
    pub evaluated: Vec<TuneRow>,
    /// Memory target in force when the search stopped.
    pub final_memory_target: u64,
    pub escalations: usize,
}

impl TuneOutcome {
    pub fn to_csv(&self) -> String {
        let mut out = format!("n_cluster,m,l,{CSV_HEADER}\n");
        for t in &self.evaluated {
            let _ = writeln!(out, "{},{},{},{}", t.config.n_cluster, t.config.m, t.config.l, t.row.csv_line());
        }
        out
    }
}

fn codewords(n: usize) -> usize {
    TUNE_CODEWORDS.min(n)
}

/// Every `(n_cluster, m)` shape considered, ignoring memory.
pub fn shape_grid(base: &IndexConfig, n: usize, d: usize) -> Vec<IndexConfig> {
    let root = (n as f64).sqrt();
    let mut clusters: Vec<usize> =
        N_CLUSTER_FACTORS.iter().map(|&f| ((f as f64 * root).round() as usize).clamp(1, n)).collect();
    clusters.dedup();
    let divisors: Vec<usize> = (1..=d).filter(|m| d.is_multiple_of(*m)).collect();
    let mut out = Vec::new();
    for &m in &divisors {
        for &n_cluster in &clusters {
            out.push(IndexConfig { n_cluster, m, l: codewords(n), ..*base });
        }
    }
    out
}

/// Smallest modelled memory over the shape grid.
pub fn minimal_memory_cost(base: &IndexConfig, n: usize, d: usize) -> u64 {
    shape_grid(base, n, d).iter().map(|c| memory_cost(c, n, d, 4)).min().unwrap_or(0)
}

/// Step one: shapes fitting `memory_target`, cheapest first.
pub fn candidates(base: &IndexConfig, n: usize, d: usize, memory_target: u64) -> Vec<IndexConfig> {
    let mut out: Vec<IndexConfig> =
        shape_grid(base, n, d).into_iter().filter(|c| memory_cost(c, n, d, 4) <= memory_target).collect();
    out.sort_by_key(|c| (memory_cost(c, n, d, 4), c.m, c.n_cluster));
    out
}

/// Valid `(ef_search, nscan, r)` points for an index with `n_cluster`
/// clusters.
pub fn search_grid(spec: &TuneSpec, n_cluster: usize) -> Vec<SearchParams> {
    let mut out = Vec::new();
    for &ef_search in &spec.ef_search_grid {
        for &nscan in &spec.nscan_grid {
            for &r in &spec.r_grid {
                let p = SearchParams { k: spec.k, r, nscan, ef_search };
                if nscan <= n_cluster && p.validate().is_ok() {
                    out.push(p);
                }
            }
        }
    }
    out
}

fn first_max_by(rows: &[&TuneRow], key: impl Fn(&TuneRow) -> (f64, f64)) -> Option<TuneRow> {
    let mut best: Option<&TuneRow> = None;
    for &r in rows {
        if best.is_none_or(|b| key(r).partial_cmp(&key(b)) == Some(std::cmp::Ordering::Greater)) {
            best = Some(r);
        }
    }
    best.cloned()
}

/// Runs the two-step search. Full-view files for the trial builds are
/// written under `workdir`.
pub fn cmd_tune(
    spec: &TuneSpec,
    dataset: &VectorDataset,
    queries: &VectorDataset,
    truth: &GroundTruth,
    workdir: &Path,
) -> Result<TuneOutcome> {
    spec.validate()?;
    ensure!(spec.k <= truth.k(), "k={} exceeds the truth file's k={}", spec.k, truth.k());
    let (n, d) = (dataset.n(), dataset.d());
    let mut target = spec.memory_target_bytes;
    let mut built: HashSet<(usize, usize)> = HashSet::new();
    let mut evaluated: Vec<TuneRow> = Vec::new();
    let fullview = workdir.join("tune.fv");

    for round in 0..=MAX_ESCALATIONS {
        for config in candidates(&spec.base_config, n, d, target) {
            if !built.insert((config.n_cluster, config.m)) {
                continue;
            }
            let grid = search_grid(spec, config.n_cluster);
            if grid.is_empty() {
                continue;
            }
            let index = MultiViewIndex::build(dataset, config, &fullview, spec.io_mode)?;
            let report = cmd_bench(&index, queries, truth, &grid, &spec.bench)?;
            evaluated.extend(report.rows.into_iter().map(|row| TuneRow { config, row }));
        }
        let qualifying: Vec<&TuneRow> = evaluated
            .iter()
            .filter(|t| t.row.memory_bytes <= target && t.row.recall >= spec.recall_target)
            .collect();
        if let Some(chosen) = first_max_by(&qualifying, |t| (t.row.vq, 0.0)) {
            return Ok(TuneOutcome {
                chosen: Some(chosen),
                best: None,
                evaluated,
                final_memory_target: target,
                escalations: round,
            });
        }
        if round < MAX_ESCALATIONS {
            target = target.saturating_add(target.div_ceil(4));
        }
    }
    let all: Vec<&TuneRow> = evaluated.iter().collect();
    Ok(TuneOutcome {
        chosen: None,
        best: first_max_by(&all, |t| (t.row.recall, t.row.vq)),
        evaluated,
        final_memory_target: target,
        escalations: MAX_ESCALATIONS,
    })
}
