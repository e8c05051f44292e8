//! The assembled index: build, query and on-disk container.
//!
//! Container layout (little-endian): magic `ZOOM`, `u32` version, a fixed
//! config block, then sections framed as `(u32 tag, u64 length)`:
//!
//! | tag | contents |
//! |-----|----------|
//! | 1 | centroids, `n_cluster * d` f32 |
//! | 2 | routing: entry point, per-node levels, then per layer the node degrees and neighbor ids (`u16` when `n_cluster <= 65536`) |
//! | 3 | PQ codebook, `l * d` f32 |
//! | 4 | inverted lists: cluster assignment per vector bit-packed at `ceil(log2 n_cluster)` bits, then codes and cached terms in list order |
//! | 5 | full-view file path and its SHA-256 |
//!
//! List membership is implicit: each list holds its vectors in id order, so
//! the assignments alone recover the ids.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::clustering::{compute_residuals, kmeans_train, ClusterModel};
use crate::config::{IndexConfig, SearchParams};
use crate::dataset::VectorDataset;
use crate::error::{Error, Result};
use crate::fullview::{partial_path, write_store, FullViewStore, IoMode, RerankPlan};
use crate::metrics::{code_bits, memory_cost};
use crate::oracle::Neighbor;
use crate::pq::{scan_pq_vectors, train_codebooks, InvertedList, InvertedLists, PQCodebook};
use crate::routing::{kosaraju, RoutingGraph};

pub const MAGIC: [u8; 4] = *b"ZOOM";
pub const VERSION: u32 = 1;

const TAG_CENTROIDS: u32 = 1;
const TAG_ROUTING: u32 = 2;
const TAG_CODEBOOK: u32 = 3;
const TAG_LISTS: u32 = 4;
const TAG_FULLVIEW: u32 = 5;

/// Offset added to the build seed for codebook training.
const CODEBOOK_SEED_OFFSET: u64 = 0x9e37_79b9;

/// Per-stage wall time of one query, in microseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub cs_us: f64,
    pub vs_us: f64,
    pub rerank_us: f64,
}

impl StageTimings {
    pub fn total_us(&self) -> f64 {
        self.cs_us + self.vs_us + self.rerank_us
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub neighbors: Vec<Neighbor>,
    pub timings: StageTimings,
}

/// Preview index over quantized vectors plus a handle on the full-view file.
#[derive(Debug)]
pub struct MultiViewIndex {
    config: IndexConfig,
    n: usize,
    d: usize,
    clusters: ClusterModel,
    routing: RoutingGraph,
    codebook: PQCodebook,
    lists: InvertedLists,
    fullview: FullViewStore,
    fullview_sha256: [u8; 32],
    augment_edges: usize,
    /// Rerank batch size; 0 submits all candidates at once.
    rerank_batch: AtomicUsize,
}

impl MultiViewIndex {
    /// Clusters, builds and augments the routing graph, trains and applies
    /// the residual quantizer, then writes the full-view file.
    pub fn build(
        dataset: &VectorDataset,
        config: IndexConfig,
        fullview_path: impl AsRef<Path>,
        io_mode: IoMode,
    ) -> Result<Self> {
        let (n, d) = (dataset.n(), dataset.d());
        config.validate(n, d)?;
        let clusters = kmeans_train(dataset, config.n_cluster, config.kmeans_iters, config.seed)?;
        let mut routing = RoutingGraph::build(&clusters, config.out_d, config.ef_construction, config.seed)?;
        let augment_edges = routing.connectivity_augment(&clusters);
        let residuals = compute_residuals(dataset, &clusters)?;
        let codebook = train_codebooks(
            &residuals,
            config.m,
            config.l,
            config.kmeans_iters,
            config.seed.wrapping_add(CODEBOOK_SEED_OFFSET),
        )?;
        let lists = InvertedLists::build(&codebook, &clusters, &residuals)?;
        let fullview = write_store(dataset, fullview_path, io_mode)?;
        let fullview_sha256 = file_sha256(fullview.path())?;
        let index = Self {
            config,
            n,
            d,
            clusters,
            routing,
            codebook,
            lists,
            fullview,
            fullview_sha256,
            augment_edges,
            rerank_batch: AtomicUsize::new(0),
        };
        index.check_invariants()?;
        Ok(index)
    }

    pub fn config(&self) -> &IndexConfig {
        &self.config
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn clusters(&self) -> &ClusterModel {
        &self.clusters
    }

    pub fn routing(&self) -> &RoutingGraph {
        &self.routing
    }

    pub fn codebook(&self) -> &PQCodebook {
        &self.codebook
    }

    pub fn lists(&self) -> &InvertedLists {
        &self.lists
    }

    pub fn fullview(&self) -> &FullViewStore {
        &self.fullview
    }

    /// Edges added by connectivity augmentation during build; 0 after
    /// deserialization.
    pub fn augment_edges(&self) -> usize {
        self.augment_edges
    }

    /// Preview memory under the analytic model, with 4-byte floats.
    pub fn memory_bytes(&self) -> u64 {
        memory_cost(&self.config, self.n, self.d, 4)
    }

    /// Fixes the rerank batch size; 0 restores one submission of all
    /// candidates.
    pub fn set_rerank_batch(&self, batch: usize) {
        self.rerank_batch.store(batch, Ordering::Relaxed);
    }

    pub fn rerank_plan(&self, r: usize) -> RerankPlan {
        match self.rerank_batch.load(Ordering::Relaxed) {
            0 => RerankPlan::covering(r, r),
            b => RerankPlan::covering(b, r),
        }
    }

    /// Measures rerank plans for `r` candidates, keeps the fastest and
    /// returns it.
    pub fn autotune_rerank(&self, r: usize) -> Result<RerankPlan> {
        let plan = self.fullview.autotune_plan(r)?;
        self.set_rerank_batch(plan.batch);
        Ok(plan)
    }

    fn check_query(&self, query: &[f32], params: &SearchParams) -> Result<()> {
        params.validate()?;
        if query.len() != self.d {
            return Err(Error::arg(format!("query has dimension {}, index has {}", query.len(), self.d)));
        }
        if params.nscan > self.config.n_cluster {
            return Err(Error::arg(format!(
                "nscan={} exceeds n_cluster={}",
                params.nscan, self.config.n_cluster
            )));
        }
        Ok(())
    }

    /// Route, scan the selected lists for the top `r` estimates, then rerank
    /// them exactly from the full view. Returns fewer than `k` neighbors
    /// only when the scanned lists hold fewer than `k` vectors.
    pub fn search(&self, query: &[f32], params: &SearchParams) -> Result<QueryResult> {
        self.check_query(query, params)?;
        let t0 = Instant::now();
        let selected = self.routing.route(&self.clusters, query, params.nscan, params.ef_search)?;
        let t1 = Instant::now();
        let candidates = scan_pq_vectors(&self.lists, &self.codebook, &selected, query, params.r)?;
        let t2 = Instant::now();
        let ids: Vec<u32> = candidates.iter().map(|&(id, _)| id).collect();
        let k = params.k.min(ids.len());
        let neighbors = if k == 0 {
            Vec::new()
        } else {
            self.fullview.rerank(query, &ids, k, self.rerank_plan(ids.len()))?
        };
        let t3 = Instant::now();
        Ok(QueryResult {
            neighbors,
            timings: StageTimings {
                cs_us: (t1 - t0).as_secs_f64() * 1e6,
                vs_us: (t2 - t1).as_secs_f64() * 1e6,
                rerank_us: (t3 - t2).as_secs_f64() * 1e6,
            },
        })
    }

    /// Top `k` by preview estimate alone; `params.r` is ignored and the
    /// returned distances are estimates.
    pub fn search_preview(&self, query: &[f32], params: &SearchParams) -> Result<QueryResult> {
        self.check_query(query, params)?;
        let t0 = Instant::now();
        let selected = self.routing.route(&self.clusters, query, params.nscan, params.ef_search)?;
        let t1 = Instant::now();
        let top = scan_pq_vectors(&self.lists, &self.codebook, &selected, query, params.k)?;
        let t2 = Instant::now();
        Ok(QueryResult {
            neighbors: top.into_iter().map(|(id, dist)| Neighbor { id, dist }).collect(),
            timings: StageTimings {
                cs_us: (t1 - t0).as_secs_f64() * 1e6,
                vs_us: (t2 - t1).as_secs_f64() * 1e6,
                rerank_us: 0.0,
            },
        })
    }

    /// Verifies the cross-component invariants.
    pub fn check_invariants(&self) -> Result<()> {
        let nc = self.clusters.n_cluster();
        if nc != self.config.n_cluster || self.routing.node_count() != nc || self.lists.n_cluster() != nc {
            return Err(Error::arg("cluster counts disagree across components"));
        }
        if self.lists.total_len() != self.n || self.fullview.n() != self.n || self.fullview.d() != self.d {
            return Err(Error::arg("vector counts disagree across components"));
        }
        let ground: Vec<Vec<u32>> = (0..nc as u32).map(|v| self.routing.neighbors(0, v).to_vec()).collect();
        if kosaraju(&ground).1 != 1 {
            return Err(Error::arg("routing ground layer is not strongly connected"));
        }
        Ok(())
    }

    /// Writes the container atomically (temporary file, then rename).
    pub fn serialize(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = partial_path(path);
        let result = self.write_container(path, &tmp).and_then(|()| Ok(fs::rename(&tmp, path)?));
        if result.is_err() {
            let _ = fs::remove_file(&tmp);
        }
        result
    }

    fn write_container(&self, path: &Path, tmp: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(tmp)?);
        w.write_all(&MAGIC)?;
        put_u32(&mut w, VERSION)?;
        let c = &self.config;
        for v in [c.n_cluster as u64, c.m as u64, c.l as u64, c.out_d as u64, c.ef_construction as u64, c.kmeans_iters as u64, c.seed, self.n as u64, self.d as u64] {
            put_u64(&mut w, v)?;
        }

        write_section(&mut w, TAG_CENTROIDS, &f32_bytes(self.clusters.centroids()))?;
        write_section(&mut w, TAG_ROUTING, &self.routing_bytes())?;
        write_section(&mut w, TAG_CODEBOOK, &f32_bytes(self.codebook.tables()))?;

        let mut lists = Vec::new();
        let bits = code_bits(self.config.n_cluster);
        lists.extend_from_slice(&(self.n as u64).to_le_bytes());
        lists.extend_from_slice(&pack_bits(self.clusters.assignments(), bits));
        for list in self.lists.lists() {
            lists.extend_from_slice(&list.codes);
        }
        for list in self.lists.lists() {
            lists.extend_from_slice(&f32_bytes(&list.cached));
        }
        write_section(&mut w, TAG_LISTS, &lists)?;

        let stored = stored_fullview_path(path, self.fullview.path())?;
        let stored = stored.to_str().ok_or_else(|| Error::arg("full-view path is not valid UTF-8"))?;
        let mut fv = Vec::new();
        fv.extend_from_slice(&(stored.len() as u32).to_le_bytes());
        fv.extend_from_slice(stored.as_bytes());
        fv.extend_from_slice(&self.fullview_sha256);
        write_section(&mut w, TAG_FULLVIEW, &fv)?;

        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        Ok(())
    }

    fn routing_bytes(&self) -> Vec<u8> {
        let g = &self.routing;
        let wide = g.node_count() > 1 << 16;
        let mut out = Vec::new();
        out.extend_from_slice(&g.entry_point().to_le_bytes());
        out.extend_from_slice(&(g.num_layers() as u32).to_le_bytes());
        out.extend_from_slice(g.node_levels());
        for layer in 0..g.num_layers() {
            let nodes = g.layer_nodes(layer);
            for &v in &nodes {
                out.extend_from_slice(&(g.neighbors(layer, v).len() as u16).to_le_bytes());
            }
            for &v in &nodes {
                for &u in g.neighbors(layer, v) {
                    if wide {
                        out.extend_from_slice(&u.to_le_bytes());
                    } else {
                        out.extend_from_slice(&(u as u16).to_le_bytes());
                    }
                }
            }
        }
        out
    }

    /// Reads a container written by [`serialize`](Self::serialize) and
    /// reopens its full-view file, verifying the recorded checksum.
    pub fn deserialize(path: impl AsRef<Path>, io_mode: IoMode) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };

        if r.take(4)? != MAGIC {
            return Err(Error::format(0, "bad index magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported index version {version}")));
        }
        let mut block = [0u64; 9];
        for v in &mut block {
            *v = r.u64()?;
        }
        let [n_cluster, m, l, out_d, ef_construction, kmeans_iters, seed, n, d] = block;
        let config = IndexConfig {
            n_cluster: n_cluster as usize,
            m: m as usize,
            l: l as usize,
            out_d: out_d as usize,
            ef_construction: ef_construction as usize,
            kmeans_iters: kmeans_iters as usize,
            seed,
        };
        let (n, d) = (n as usize, d as usize);
        config
            .validate(n, d)
            .map_err(|e| Error::format(8, format!("config block: {e}")))?;
        let nc = config.n_cluster;

        let mut sec = r.section(TAG_CENTROIDS)?;
        let centroids = sec.f32s(nc * d)?;
        sec.finish()?;

        let mut sec = r.section(TAG_ROUTING)?;
        let routing = read_routing(&mut sec, nc, config.out_d)?;
        sec.finish()?;

        let mut sec = r.section(TAG_CODEBOOK)?;
        let tables = sec.f32s(config.l * d)?;
        let codebook = PQCodebook::from_tables(d, config.m, config.l, tables)
            .map_err(|e| Error::format(sec.offset(), e.to_string()))?;
        sec.finish()?;

        let mut sec = r.section(TAG_LISTS)?;
        let at = sec.offset();
        if sec.u64()? as usize != n {
            return Err(Error::format(at, "list section vector count mismatch"));
        }
        let bits = code_bits(nc);
        let packed = sec.take((n * bits as usize).div_ceil(8))?;
        let assignments = unpack_bits(packed, bits, n);
        if let Some(&bad) = assignments.iter().find(|&&c| c as usize >= nc) {
            return Err(Error::format(at, format!("assignment {bad} out of range")));
        }
        let clusters = ClusterModel::from_parts(d, centroids, assignments)
            .map_err(|e| Error::format(at, e.to_string()))?;
        let mut lists: Vec<InvertedList> = clusters
            .sizes()
            .iter()
            .map(|&s| InvertedList { ids: Vec::with_capacity(s), codes: Vec::new(), cached: Vec::new() })
            .collect();
        for (i, &c) in clusters.assignments().iter().enumerate() {
            lists[c as usize].ids.push(i as u32);
        }
        for list in &mut lists {
            list.codes = sec.take(list.ids.len() * config.m)?.to_vec();
        }
        for list in &mut lists {
            list.cached = sec.f32s(list.ids.len())?;
        }
        sec.finish()?;
        let lists = InvertedLists::from_lists(config.m, lists)?;

        let mut sec = r.section(TAG_FULLVIEW)?;
        let len = sec.u32()? as usize;
        let at = sec.offset();
        let stored = std::str::from_utf8(sec.take(len)?)
            .map_err(|_| Error::format(at, "full-view path is not valid UTF-8"))?
            .to_owned();
        let mut fullview_sha256 = [0u8; 32];
        fullview_sha256.copy_from_slice(sec.take(32)?);
        sec.finish()?;
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes after last section"));
        }

        let fv_path = resolve_fullview_path(path, Path::new(&stored));
        if file_sha256(&fv_path)? != fullview_sha256 {
            return Err(Error::format(at, format!("checksum mismatch for {}", fv_path.display())));
        }
        let fullview = FullViewStore::open(&fv_path, io_mode)?;

        let index = Self {
            config,
            n,
            d,
            clusters,
            routing,
            codebook,
            lists,
            fullview,
            fullview_sha256,
            augment_edges: 0,
            rerank_batch: AtomicUsize::new(0),
        };
        index.check_invariants().map_err(|e| Error::format(0, e.to_string()))?;
        Ok(index)
    }
}

fn read_routing(sec: &mut Reader<'_>, nc: usize, out_d: usize) -> Result<RoutingGraph> {
    let at = sec.offset();
    let entry = sec.u32()?;
    let num_layers = sec.u32()? as usize;
    let levels = sec.take(nc)?.to_vec();
    let wide = nc > 1 << 16;
    let mut layers = Vec::with_capacity(num_layers);
    for layer in 0..num_layers {
        let nodes: Vec<usize> = (0..nc).filter(|&v| levels[v] as usize >= layer).collect();
        let mut degrees = Vec::with_capacity(nodes.len());
        for _ in &nodes {
            degrees.push(sec.u16()? as usize);
        }
        let mut adj = vec![Vec::new(); nc];
        for (&v, &deg) in nodes.iter().zip(&degrees) {
            let mut list = Vec::with_capacity(deg);
            for _ in 0..deg {
                list.push(if wide { sec.u32()? } else { sec.u16()? as u32 });
            }
            adj[v] = list;
        }
        layers.push(adj);
    }
    RoutingGraph::from_layers(out_d, entry, levels, layers).map_err(|e| Error::format(at, e.to_string()))
}

/// Path recorded for the full-view file: its bare name when it sits next to
/// the index, otherwise absolute.
fn stored_fullview_path(index_path: &Path, fullview: &Path) -> Result<PathBuf> {
    let fv = fs::canonicalize(fullview)?;
    let index_dir = index_path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let index_dir = fs::canonicalize(index_dir)?;
    match (fv.parent(), fv.file_name()) {
        (Some(dir), Some(name)) if dir == index_dir => Ok(PathBuf::from(name)),
        _ => Ok(fv),
    }
}

fn resolve_fullview_path(index_path: &Path, stored: &Path) -> PathBuf {
    if stored.is_absolute() {
        stored.to_path_buf()
    } else {
        index_path.parent().unwrap_or(Path::new("")).join(stored)
    }
}

fn file_sha256(path: &Path) -> Result<[u8; 32]> {
    let mut hasher = Sha256::new();
    let mut f = File::open(path)?;
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let k = f.read(&mut buf)?;
        if k == 0 {
            break;
        }
        hasher.update(&buf[..k]);
    }
    Ok(hasher.finalize().into())
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_section(w: &mut impl Write, tag: u32, payload: &[u8]) -> std::io::Result<()> {
    put_u32(w, tag)?;
    put_u64(w, payload.len() as u64)?;
    w.write_all(payload)
}

fn f32_bytes(xs: &[f32]) -> Vec<u8> {
    xs.iter().flat_map(|x| x.to_le_bytes()).collect()
}

/// Packs each value into `bits` bits, least significant bit first.
fn pack_bits(values: &[u32], bits: u32) -> Vec<u8> {
    let mut out = vec![0u8; (values.len() * bits as usize).div_ceil(8)];
    let mut pos = 0usize;
    for &v in values {
        for b in 0..bits {
            if v >> b & 1 == 1 {
                out[pos / 8] |= 1 << (pos % 8);
            }
            pos += 1;
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], bits: u32, count: usize) -> Vec<u32> {
    let mut pos = 0usize;
    (0..count)
        .map(|_| {
            let mut v = 0u32;
            for b in 0..bits {
                if bytes[pos / 8] >> (pos % 8) & 1 == 1 {
                    v |= 1 << b;
                }
                pos += 1;
            }
            v
        })
        .collect()
}

/// Bounds-checked little-endian cursor reporting absolute offsets.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(self.pos as u64, format!("truncated: need {len} more bytes")));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let raw = self.take(count.checked_mul(4).ok_or_else(|| Error::format(self.offset(), "length overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
    }

    /// Reads a section header with the expected tag and returns a reader
    /// restricted to its payload, positioned at absolute offsets.
    fn section(&mut self, tag: u32) -> Result<Reader<'a>> {
        let at = self.offset();
        let got = self.u32()?;
        if got != tag {
            return Err(Error::format(at, format!("expected section {tag}, found {got}")));
        }
        let len = self.u64()? as usize;
        let start = self.pos;
        self.take(len)?;
        Ok(Reader { bytes: &self.bytes[..start + len], pos: start })
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.offset(), "section has unread bytes"));
        }
        Ok(())
    }
}
