//! Command-line front end.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mvann::{
    generate_synthetic, load_dataset, write_dataset, DataFormat, IndexConfig, IoMode, MultiViewIndex, SearchParams,
    VectorDataset,
};

use crate::bench::{cmd_bench, BenchOptions, DEFAULT_MACHINE_MEMORY};
use crate::truth::{cmd_oracle, GroundTruth};
use crate::tune::{cmd_tune, minimal_memory_cost, TuneSpec};

/// Header of `query` output.
pub const QUERY_CSV_HEADER: &str = "query,rank,id,distance,t_cs_us,t_vs_us,t_rerank_us";

/// Exit status when tuning finds no configuration meeting the target.
pub const EXIT_TUNE_FAILED: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "mvann", version, about = "Multi-view ANN index: build, query, benchmark, tune")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build an index and its full-view file from a dataset.
    Build(BuildArgs),
    /// Search an index and print neighbors with stage timings as CSV.
    Query(QueryArgs),
    /// Measure recall, latency, memory and VQ over a parameter grid.
    Bench(BenchArgs),
    /// Pick index shape and search parameters for a recall and memory target.
    Tune(TuneArgs),
    /// Compute exact nearest neighbors for a query set.
    Oracle(OracleArgs),
    /// Generate a synthetic Gaussian-blob dataset and query set.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Fvecs,
    Bvecs,
    Raw,
}

impl From<FormatArg> for DataFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Fvecs => DataFormat::Fvecs,
            FormatArg::Bvecs => DataFormat::Bvecs,
            FormatArg::Raw => DataFormat::RawF32,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum IoModeArg {
    Direct,
    Buffered,
}

impl From<IoModeArg> for IoMode {
    fn from(m: IoModeArg) -> Self {
        match m {
            IoModeArg::Direct => IoMode::Direct,
            IoModeArg::Buffered => IoMode::Buffered,
        }
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Vector file format; guessed from the extension when omitted.
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
}

impl DataArgs {
    fn load(&self, path: &Path) -> Result<VectorDataset> {
        let format = match self.format {
            Some(f) => f.into(),
            None => DataFormat::from_extension(path).unwrap_or(DataFormat::Fvecs),
        };
        load_dataset(path, format).with_context(|| format!("loading {}", path.display()))
    }
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output index container.
    #[arg(long)]
    pub index: PathBuf,
    /// Full-view file; defaults to the index path with extension `fv`.
    #[arg(long)]
    pub fullview: Option<PathBuf>,
    #[arg(long, default_value_t = IndexConfig::default().n_cluster)]
    pub n_cluster: usize,
    #[arg(long, default_value_t = IndexConfig::default().m)]
    pub m: usize,
    #[arg(long, default_value_t = IndexConfig::default().l)]
    pub l: usize,
    #[arg(long, default_value_t = IndexConfig::default().out_d)]
    pub out_d: usize,
    #[arg(long, default_value_t = IndexConfig::default().ef_construction)]
    pub ef_construction: usize,
    #[arg(long, default_value_t = IndexConfig::default().kmeans_iters)]
    pub kmeans_iters: usize,
    #[arg(long, default_value_t = IndexConfig::default().seed)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "direct")]
    pub io_mode: IoModeArg,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 100)]
    pub r: usize,
    #[arg(long, default_value_t = 32)]
    pub nscan: usize,
    #[arg(long, default_value_t = 64)]
    pub ef_search: usize,
    /// Rerank batch size; 0 submits all candidates at once.
    #[arg(long, default_value_t = 0)]
    pub rerank_batch: usize,
    #[arg(long, value_enum, default_value = "direct")]
    pub io_mode: IoModeArg,
    /// CSV output path; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "10")]
    pub k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "100")]
    pub r: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "32")]
    pub nscan: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "64")]
    pub ef_search: Vec<usize>,
    /// Add a preview-only row next to each full-pipeline row.
    #[arg(long)]
    pub preview: bool,
    /// Concurrent query threads.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Pick the rerank batch size by measurement for each r.
    #[arg(long)]
    pub autotune: bool,
    #[arg(long, default_value_t = DEFAULT_MACHINE_MEMORY)]
    pub machine_memory: u64,
    #[arg(long, value_enum, default_value = "direct")]
    pub io_mode: IoModeArg,
    /// CSV output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    pub recall_target: f64,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    /// Memory target in bytes; defaults to twice the smallest modelled cost.
    #[arg(long)]
    pub memory_target: Option<u64>,
    #[arg(long, value_delimiter = ',', default_value = "64")]
    pub ef_search: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
    pub nscan: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "20,50,100")]
    pub r: Vec<usize>,
    #[arg(long, default_value_t = IndexConfig::default().out_d)]
    pub out_d: usize,
    #[arg(long, default_value_t = IndexConfig::default().ef_construction)]
    pub ef_construction: usize,
    #[arg(long, default_value_t = IndexConfig::default().kmeans_iters)]
    pub kmeans_iters: usize,
    #[arg(long, default_value_t = IndexConfig::default().seed)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_MACHINE_MEMORY)]
    pub machine_memory: u64,
    /// Directory for trial full-view files; a temporary one when omitted.
    #[arg(long)]
    pub workdir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "direct")]
    pub io_mode: IoModeArg,
    /// CSV of every measured point.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    /// Ground-truth output file.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 50_000)]
    pub n: usize,
    #[arg(long, default_value_t = 1_000)]
    pub num_queries: usize,
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    /// Number of Gaussian blobs.
    #[arg(long, default_value_t = 64)]
    pub clusters: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Dataset output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Query output path; skipped when omitted.
    #[arg(long)]
    pub queries_out: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
}

pub fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Build(a) => build(a),
        Command::Query(a) => query(a),
        Command::Bench(a) => bench(a),
        Command::Tune(a) => tune(a),
        Command::Oracle(a) => oracle(a),
        Command::Synth(a) => synth(a),
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn build(a: BuildArgs) -> Result<ExitCode> {
    let data = a.data.load(&a.dataset)?;
    let config = IndexConfig {
        n_cluster: a.n_cluster,
        m: a.m,
        l: a.l,
        out_d: a.out_d,
        ef_construction: a.ef_construction,
        kmeans_iters: a.kmeans_iters,
        seed: a.seed,
    };
    let fullview = a.fullview.unwrap_or_else(|| a.index.with_extension("fv"));
    let start = Instant::now();
    let index = MultiViewIndex::build(&data, config, &fullview, a.io_mode.into())?;
    index.serialize(&a.index)?;
    let size = fs::metadata(&a.index)?.len();
    println!(
        "built {} vectors of dimension {} in {:.1}s: {} clusters, {} augmentation edges, model memory {} bytes, index file {} bytes",
        index.n(),
        index.d(),
        start.elapsed().as_secs_f64(),
        config.n_cluster,
        index.augment_edges(),
        index.memory_bytes(),
        size
    );
    Ok(ExitCode::SUCCESS)
}

fn query(a: QueryArgs) -> Result<ExitCode> {
    let index = MultiViewIndex::deserialize(&a.index, a.io_mode.into())?;
    index.set_rerank_batch(a.rerank_batch);
    let queries = a.data.load(&a.queries)?;
    let params = SearchParams { k: a.k, r: a.r, nscan: a.nscan, ef_search: a.ef_search };
    let mut w = output(a.out.as_deref())?;
    writeln!(w, "{QUERY_CSV_HEADER}")?;
    for (qi, q) in queries.rows().enumerate() {
        let res = index.search(q, &params)?;
        let t = res.timings;
        for (rank, n) in res.neighbors.iter().enumerate() {
            writeln!(w, "{qi},{rank},{},{},{},{},{}", n.id, n.dist, t.cs_us, t.vs_us, t.rerank_us)?;
        }
    }
    w.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn grid(k: &[usize], r: &[usize], nscan: &[usize], ef: &[usize]) -> Vec<SearchParams> {
    let mut out = Vec::new();
    for &k in k {
        for &ef_search in ef {
            for &nscan in nscan {
                for &r in r {
                    out.push(SearchParams { k, r, nscan, ef_search });
                }
            }
        }
    }
    out
}

fn bench(a: BenchArgs) -> Result<ExitCode> {
    let index = MultiViewIndex::deserialize(&a.index, a.io_mode.into())?;
    let queries = a.data.load(&a.queries)?;
    let truth = GroundTruth::read(&a.truth)?;
    let points = grid(&a.k, &a.r, &a.nscan, &a.ef_search);
    for p in &points {
        p.validate().with_context(|| format!("grid point {p:?}"))?;
    }
    let options = BenchOptions {
        include_preview: a.preview,
        threads: a.threads.max(1),
        machine_memory_bytes: a.machine_memory,
    };
    let mut report = crate::report::BenchReport::default();
    for p in points {
        if a.autotune {
            index.autotune_rerank(p.r)?;
        }
        report.rows.extend(cmd_bench(&index, &queries, &truth, &[p], &options)?.rows);
    }
    print!("{}", report.table());
    if let Some(out) = &a.out {
        report.write_csv(out)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn tune(a: TuneArgs) -> Result<ExitCode> {
    let data = a.data.load(&a.dataset)?;
    let queries = a.data.load(&a.queries)?;
    let truth = GroundTruth::read(&a.truth)?;
    let base_config = IndexConfig {
        out_d: a.out_d,
        ef_construction: a.ef_construction,
        kmeans_iters: a.kmeans_iters,
        seed: a.seed,
        ..Default::default()
    };
    let memory_target_bytes =
        a.memory_target.unwrap_or_else(|| 2 * minimal_memory_cost(&base_config, data.n(), data.d()));
    let spec = TuneSpec {
        memory_target_bytes,
        recall_target: a.recall_target,
        k: a.k,
        ef_search_grid: a.ef_search,
        nscan_grid: a.nscan,
        r_grid: a.r,
        base_config,
        io_mode: a.io_mode.into(),
        bench: BenchOptions { machine_memory_bytes: a.machine_memory, ..Default::default() },
    };
    let tmp;
    let workdir = match &a.workdir {
        Some(p) => p.as_path(),
        None => {
            tmp = tempfile::tempdir()?;
            tmp.path()
        }
    };
    let outcome = cmd_tune(&spec, &data, &queries, &truth, workdir)?;
    if let Some(out) = &a.out {
        fs::write(out, outcome.to_csv())?;
    }
    let describe = |t: &crate::tune::TuneRow| {
        let p = t.row.params;
        format!(
            "n_cluster={} m={} l={} ef_search={} nscan={} r={} k={} recall={:.4} latency_ms={:.4} memory_bytes={} vq={:.4e}",
            t.config.n_cluster, t.config.m, t.config.l, p.ef_search, p.nscan, p.r, p.k, t.row.recall,
            t.row.latency_ms_mean, t.row.memory_bytes, t.row.vq
        )
    };
    match (&outcome.chosen, &outcome.best) {
        (Some(c), _) => {
            println!("chosen: {} (memory target {} bytes)", describe(c), outcome.final_memory_target);
            Ok(ExitCode::SUCCESS)
        }
        (None, best) => {
            println!(
                "no configuration reached recall {} within {} bytes after {} escalations",
                spec.recall_target, outcome.final_memory_target, outcome.escalations
            );
            if let Some(b) = best {
                println!("best: {}", describe(b));
            }
            Ok(ExitCode::from(EXIT_TUNE_FAILED))
        }
    }
}

fn oracle(a: OracleArgs) -> Result<ExitCode> {
    let data = a.data.load(&a.dataset)?;
    let queries = a.data.load(&a.queries)?;
    if a.k == 0 || a.k > data.n() {
        bail!("k={} must be in 1..={}", a.k, data.n());
    }
    let truth = cmd_oracle(&data, &queries, a.k, &a.out)?;
    println!("wrote exact top-{} for {} queries to {}", truth.k(), truth.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let all = generate_synthetic(a.n + a.num_queries, a.d, a.clusters, a.seed)?;
    let (base, queries) = all.split_tail(a.num_queries)?;
    let format = |p: &Path| match a.data.format {
        Some(f) => f.into(),
        None => DataFormat::from_extension(p).unwrap_or(DataFormat::Fvecs),
    };
    write_dataset(&base, &a.out, format(&a.out))?;
    if let Some(q) = &a.queries_out {
        write_dataset(&queries, q, format(q))?;
    }
    Ok(ExitCode::SUCCESS)
}
