//! Benchmark rows and their CSV / table renderings.
//!
//! CSV columns, in order: `k, nscan, ef_search, r, mode, recall,
//! latency_ms_mean, latency_ms_p99, t_cs_ms, t_vs_ms, t_rerank_ms,
//! memory_bytes, vq, qps`. `mode` is `full` or `preview`. Floats are written
//! in shortest round-trip form, so `vq` can be recomputed exactly from the
//! row's latency and memory columns.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::Result;
use mvann::SearchParams;

pub const CSV_HEADER: &str =
    "k,nscan,ef_search,r,mode,recall,latency_ms_mean,latency_ms_p99,t_cs_ms,t_vs_ms,t_rerank_ms,memory_bytes,vq,qps";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Route, scan and rerank.
    Full,
    /// Route and scan only; top-k by estimated distance.
    Preview,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::Preview => "preview",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub params: SearchParams,
    pub mode: Mode,
    pub recall: f64,
    pub latency_ms_mean: f64,
    pub latency_ms_p99: f64,
    pub t_cs_ms: f64,
    pub t_vs_ms: f64,
    pub t_rerank_ms: f64,
    pub memory_bytes: u64,
    pub vq: f64,
    pub qps: f64,
}

impl BenchRow {
    pub fn csv_line(&self) -> String {
        let p = &self.params;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            p.k,
            p.nscan,
            p.ef_search,
            p.r,
            self.mode.as_str(),
            self.recall,
            self.latency_ms_mean,
            self.latency_ms_p99,
            self.t_cs_ms,
            self.t_vs_ms,
            self.t_rerank_ms,
            self.memory_bytes,
            self.vq,
            self.qps
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.csv_line());
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Fixed-width table for terminals.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:>4} {:>6} {:>6} {:>5} {:>8} {:>7} {:>9} {:>9} {:>8} {:>8} {:>8} {:>11} {:>10} {:>9}\n",
            "k", "nscan", "ef", "r", "mode", "recall", "lat_ms", "p99_ms", "cs_ms", "vs_ms", "rr_ms", "memory", "vq", "qps"
        );
        for r in &self.rows {
            let p = &r.params;
            let _ = writeln!(
                out,
                "{:>4} {:>6} {:>6} {:>5} {:>8} {:>7.4} {:>9.4} {:>9.4} {:>8.4} {:>8.4} {:>8.4} {:>11} {:>10.3e} {:>9.1}",
                p.k,
                p.nscan,
                p.ef_search,
                p.r,
                r.mode.as_str(),
                r.recall,
                r.latency_ms_mean,
                r.latency_ms_p99,
                r.t_cs_ms,
                r.t_vs_ms,
                r.t_rerank_ms,
                r.memory_bytes,
                r.vq,
                r.qps
            );
        }
        out
    }
}
