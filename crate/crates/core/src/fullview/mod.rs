//! SSD-resident full-length vectors and the exact reranking step.
//!
//! File layout (little-endian): a 32-byte header: magic `ZFVW`, `u32`
//! version, `u64` n, `u64` d, 8 reserved zero bytes, followed by `n`
//! back-to-back records of `d` `f32`s. Vector `i` lives at byte
//! `32 + i * 4d`.
//!
//! Reads are issued in batches of `b` candidates, `s` batches per rerank.
//! In [`IoMode::Direct`] the file is opened with `O_DIRECT` and every read
//! covers the record with an `alignment_bytes`-aligned offset, length and
//! buffer; on Linux each batch goes to the kernel in a single `io_submit`
//! and completions are consumed in whatever order they arrive.

mod aligned;
#[cfg(target_os = "linux")]
mod aio;

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
#[cfg(target_os = "linux")]
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::VectorDataset;
use crate::distance::l2_sq;
use crate::error::{Error, Result};
use crate::oracle::Neighbor;
use crate::topk::BoundedMaxHeap;
use aligned::AlignedBuf;

pub const MAGIC: [u8; 4] = *b"ZFVW";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: u64 = 32;
pub const DEFAULT_ALIGNMENT: usize = 4096;

/// Batch sizes tried by [`FullViewStore::autotune_plan`], plus `r` itself.
pub const AUTOTUNE_BATCHES: [usize; 5] = [1, 4, 8, 16, 32];
const AUTOTUNE_RUNS: usize = 5;
const AUTOTUNE_SEED: u64 = 0x5eed;
#[cfg(target_os = "linux")]
const AIO_CAPACITY: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IoMode {
    /// Page-cache bypass with aligned reads.
    Direct,
    /// Plain buffered reads.
    Buffered,
}

impl FromStr for IoMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Self::Direct),
            "buffered" => Ok(Self::Buffered),
            other => Err(Error::arg(format!("unknown io mode '{other}'"))),
        }
    }
}

/// `s` rounds of `b` concurrent reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RerankPlan {
    pub batch: usize,
    pub submissions: usize,
}

impl RerankPlan {
    /// Batch size `b` with `s = ceil(r / b)` submissions.
    pub fn covering(batch: usize, r: usize) -> Self {
        let batch = batch.clamp(1, r.max(1));
        Self { batch, submissions: r.max(1).div_ceil(batch) }
    }

    pub fn capacity(&self) -> usize {
        self.batch * self.submissions
    }
}

enum Engine {
    Sync,
    #[cfg(target_os = "linux")]
    Aio(Mutex<Vec<aio::AioContext>>),
}

/// Read-only handle on a full-view file.
pub struct FullViewStore {
    path: PathBuf,
    n: usize,
    d: usize,
    io_mode: IoMode,
    alignment: usize,
    file: File,
    engine: Engine,
}

impl std::fmt::Debug for FullViewStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FullViewStore")
            .field("path", &self.path)
            .field("n", &self.n)
            .field("d", &self.d)
            .field("io_mode", &self.io_mode)
            .field("async", &self.is_async())
            .finish()
    }
}

/// Writes `dataset` as a full-view file (via a temporary file and rename)
/// and opens it.
pub fn write_store(dataset: &VectorDataset, path: impl AsRef<Path>, io_mode: IoMode) -> Result<FullViewStore> {
    let path = path.as_ref();
    let tmp = partial_path(path);
    let written = (|| -> io::Result<()> {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(dataset.n() as u64).to_le_bytes())?;
        w.write_all(&(dataset.d() as u64).to_le_bytes())?;
        w.write_all(&[0u8; 8])?;
        for x in dataset.as_slice() {
            w.write_all(&x.to_le_bytes())?;
        }
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = written {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    FullViewStore::open(path, io_mode)
}

pub(crate) fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

impl FullViewStore {
    pub fn open(path: impl AsRef<Path>, io_mode: IoMode) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut header = [0u8; HEADER_BYTES as usize];
        let mut f = File::open(&path)?;
        f.read_exact(&mut header).map_err(|_| Error::format(0, "truncated full-view header"))?;
        if header[0..4] != MAGIC {
            return Err(Error::format(0, "bad full-view magic"));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported full-view version {version}")));
        }
        let n = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
        let d = u64::from_le_bytes(header[16..24].try_into().unwrap()) as usize;
        let expected = HEADER_BYTES + (n as u64) * (d as u64) * 4;
        let actual = f.metadata()?.len();
        if d == 0 || actual != expected {
            return Err(Error::format(8, format!("header promises {expected} bytes, file has {actual}")));
        }
        drop(f);

        let file = open_data_file(&path, io_mode)?;
        let engine = match io_mode {
            IoMode::Buffered => Engine::Sync,
            IoMode::Direct => direct_engine(),
        };
        Ok(Self { path, n, d, io_mode, alignment: DEFAULT_ALIGNMENT, file, engine })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn io_mode(&self) -> IoMode {
        self.io_mode
    }

    pub fn alignment_bytes(&self) -> usize {
        self.alignment
    }

    pub fn record_bytes(&self) -> usize {
        self.d * 4
    }

    /// Whether direct reads go through the kernel's asynchronous interface.
    pub fn is_async(&self) -> bool {
        !matches!(self.engine, Engine::Sync)
    }

    fn record_offset(&self, id: u32) -> u64 {
        HEADER_BYTES + id as u64 * self.record_bytes() as u64
    }

    /// Aligned `(start, len)` covering record `id`.
    fn aligned_span(&self, id: u32) -> (u64, usize) {
        let a = self.alignment as u64;
        let off = self.record_offset(id);
        let start = off / a * a;
        let end = (off + self.record_bytes() as u64).div_ceil(a) * a;
        (start, (end - start) as usize)
    }

    fn slot_bytes(&self) -> usize {
        (self.record_bytes().div_ceil(self.alignment) + 1) * self.alignment
    }

    fn check(&self, ids: &[u32], plan: RerankPlan) -> Result<()> {
        if plan.batch == 0 || plan.submissions == 0 {
            return Err(Error::arg("rerank plan needs b >= 1 and s >= 1"));
        }
        if plan.capacity() < ids.len() {
            return Err(Error::arg(format!(
                "plan b={} s={} covers {} candidates, {} requested",
                plan.batch,
                plan.submissions,
                plan.capacity(),
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.n) {
            return Err(Error::arg(format!("vector id {bad} out of range (n={})", self.n)));
        }
        Ok(())
    }

    /// Loads each requested vector once per occurrence and calls `sink`
    /// with its position in `ids` and its contents, in completion order.
    fn load_each(&self, ids: &[u32], plan: RerankPlan, mut sink: impl FnMut(usize, &[f32])) -> Result<()> {
        self.check(ids, plan)?;
        let mut vec = vec![0.0f32; self.d];
        let rb = self.record_bytes();
        let decode = |bytes: &[u8], out: &mut [f32]| {
            for (x, b) in out.iter_mut().zip(bytes.chunks_exact(4)) {
                *x = f32::from_le_bytes(b.try_into().unwrap());
            }
        };

        match (&self.engine, self.io_mode) {
            (_, IoMode::Buffered) => {
                let mut buf = vec![0u8; rb];
                for (pos, &id) in ids.iter().enumerate() {
                    read_exact_at(&self.file, &mut buf, self.record_offset(id))
                        .map_err(|source| Error::Storage { id, source })?;
                    decode(&buf, &mut vec);
                    sink(pos, &vec);
                }
            }
            (Engine::Sync, IoMode::Direct) => {
                let slot = self.slot_bytes();
                let mut buf = AlignedBuf::new(slot, self.alignment);
                for (pos, &id) in ids.iter().enumerate() {
                    let (start, len) = self.aligned_span(id);
                    let got = read_at_most(&self.file, &mut buf[..len], start)
                        .map_err(|source| Error::Storage { id, source })?;
                    let skip = (self.record_offset(id) - start) as usize;
                    if got < skip + rb {
                        return Err(short_read(id));
                    }
                    decode(&buf[skip..skip + rb], &mut vec);
                    sink(pos, &vec);
                }
            }
            #[cfg(target_os = "linux")]
            (Engine::Aio(pool), IoMode::Direct) => {
                let ctx = pool.lock().unwrap().pop();
                let mut ctx = match ctx {
                    Some(c) => c,
                    None => aio::AioContext::new(AIO_CAPACITY)?,
                };
                let result = self.load_async(&mut ctx, ids, plan, &mut vec, &mut sink);
                pool.lock().unwrap().push(ctx);
                result?;
            }
        }
        Ok(())
    }

    #[cfg(target_os = "linux")]
    fn load_async(
        &self,
        ctx: &mut aio::AioContext,
        ids: &[u32],
        plan: RerankPlan,
        vec: &mut [f32],
        sink: &mut impl FnMut(usize, &[f32]),
    ) -> Result<()> {
        use std::os::fd::AsRawFd;

        let rb = self.record_bytes();
        let slot = self.slot_bytes();
        let per_submit = plan.batch.min(ctx.capacity());
        let mut arena = AlignedBuf::new(slot * per_submit, self.alignment);
        let base = arena.as_mut_ptr();
        let fd = self.file.as_raw_fd();
        let mut reqs = Vec::with_capacity(per_submit);

        for (chunk_no, chunk) in ids.chunks(per_submit).enumerate() {
            let base_pos = chunk_no * per_submit;
            reqs.clear();
            for (i, &id) in chunk.iter().enumerate() {
                let (start, len) = self.aligned_span(id);
                reqs.push(aio::ReadReq {
                    tag: i as u64,
                    // SAFETY: slot i lies within the arena.
                    buf: unsafe { base.add(i * slot) },
                    len,
                    offset: start,
                });
            }
            // SAFETY: every request targets a distinct slot of `arena`,
            // which outlives the call; completed slots are only read after
            // the kernel reports them.
            let outcome = unsafe {
                ctx.read_batch(fd, &reqs, |done| {
                    let i = done.tag as usize;
                    let id = chunk[i];
                    let got = done.result.map_err(|e| io::Error::other(StorageFailure(id, e)))?;
                    let skip = (self.record_offset(id) - reqs[i].offset) as usize;
                    if got < skip + rb {
                        return Err(io::Error::other(StorageFailure(
                            id,
                            io::Error::new(io::ErrorKind::UnexpectedEof, "short read"),
                        )));
                    }
                    let bytes = std::slice::from_raw_parts(base.add(i * slot + skip), rb);
                    for (x, b) in vec.iter_mut().zip(bytes.chunks_exact(4)) {
                        *x = f32::from_le_bytes(b.try_into().unwrap());
                    }
                    sink(base_pos + i, vec);
                    Ok(())
                })
            };
            if let Err(e) = outcome {
                return Err(match e.into_inner().map(|inner| inner.downcast::<StorageFailure>()) {
                    Some(Ok(failure)) => Error::Storage { id: failure.0, source: failure.1 },
                    Some(Err(other)) => Error::Storage { id: chunk[0], source: io::Error::other(other) },
                    None => Error::Storage { id: chunk[0], source: io::Error::other("asynchronous read failed") },
                });
            }
        }
        Ok(())
    }

    /// Returns every requested vector once per occurrence, in completion
    /// order.
    pub fn read_batch(&self, ids: &[u32], plan: RerankPlan) -> Result<Vec<(u32, Vec<f32>)>> {
        let mut out = Vec::with_capacity(ids.len());
        self.load_each(ids, plan, |pos, v| out.push((ids[pos], v.to_vec())))?;
        Ok(out)
    }

    /// Exact top-`k` of `candidates` by squared distance recomputed from the
    /// stored vectors, ascending, ties to the lower id.
    pub fn rerank(&self, query: &[f32], candidates: &[u32], k: usize, plan: RerankPlan) -> Result<Vec<Neighbor>> {
        if query.len() != self.d {
            return Err(Error::arg(format!("query has dimension {}, store has {}", query.len(), self.d)));
        }
        if k > candidates.len() {
            return Err(Error::arg(format!("k={k} exceeds {} candidates", candidates.len())));
        }
        let mut top = BoundedMaxHeap::new(k);
        self.load_each(candidates, plan, |pos, v| {
            let id = candidates[pos];
            top.push(l2_sq(query, v), id as u64, id);
        })?;
        Ok(top.into_sorted().into_iter().map(|e| Neighbor { id: e.id, dist: e.dist }).collect())
    }

    /// Wall time of `runs` reranks of `r` random candidates under `plan`.
    /// Candidate sets are drawn from a fixed seed, so every plan sees the
    /// same sequence of id sets.
    pub fn measure_plan(&self, plan: RerankPlan, r: usize, runs: usize) -> Result<Vec<Duration>> {
        let mut rng = ChaCha8Rng::seed_from_u64(AUTOTUNE_SEED);
        let query = vec![0.0f32; self.d];
        let mut times = Vec::with_capacity(runs);
        for _ in 0..runs {
            let ids: Vec<u32> = (0..r).map(|_| rng.random_range(0..self.n as u32)).collect();
            let start = Instant::now();
            self.rerank(&query, &ids, 1.min(r), plan)?;
            times.push(start.elapsed());
        }
        Ok(times)
    }

    /// Picks the fastest `b` from `{1, 4, 8, 16, 32, r}` (each with
    /// `s = ceil(r / b)`) by median latency over five measured reranks.
    pub fn autotune_plan(&self, r: usize) -> Result<RerankPlan> {
        if r == 0 {
            return Err(Error::arg("r must be at least 1"));
        }
        let mut batches: Vec<usize> = AUTOTUNE_BATCHES.iter().copied().chain([r]).filter(|&b| b <= r).collect();
        batches.sort_unstable();
        batches.dedup();
        let mut best: Option<(Duration, RerankPlan)> = None;
        for b in batches {
            let plan = RerankPlan::covering(b, r);
            let med = median(self.measure_plan(plan, r, AUTOTUNE_RUNS)?);
            if best.is_none_or(|(t, _)| med < t) {
                best = Some((med, plan));
            }
        }
        Ok(best.unwrap().1)
    }
}

pub fn median(mut xs: Vec<Duration>) -> Duration {
    xs.sort_unstable();
    xs[xs.len() / 2]
}

#[derive(Debug)]
struct StorageFailure(u32, io::Error);

impl std::fmt::Display for StorageFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "vector {}: {}", self.0, self.1)
    }
}

impl std::error::Error for StorageFailure {}

fn short_read(id: u32) -> Error {
    Error::Storage { id, source: io::Error::new(io::ErrorKind::UnexpectedEof, "short read") }
}

#[cfg(target_os = "linux")]
fn open_data_file(path: &Path, io_mode: IoMode) -> Result<File> {
    use std::os::unix::fs::OpenOptionsExt;
    let mut opts = OpenOptions::new();
    opts.read(true);
    if io_mode == IoMode::Direct {
        opts.custom_flags(libc::O_DIRECT);
    }
    Ok(opts.open(path)?)
}

#[cfg(not(target_os = "linux"))]
fn open_data_file(path: &Path, _io_mode: IoMode) -> Result<File> {
    Ok(OpenOptions::new().read(true).open(path)?)
}

#[cfg(target_os = "linux")]
fn direct_engine() -> Engine {
    match aio::AioContext::new(AIO_CAPACITY) {
        Ok(ctx) => Engine::Aio(Mutex::new(vec![ctx])),
        Err(_) => Engine::Sync,
    }
}

#[cfg(not(target_os = "linux"))]
fn direct_engine() -> Engine {
    Engine::Sync
}

#[cfg(unix)]
fn read_at_most(file: &File, buf: &mut [u8], offset: u64) -> io::Result<usize> {
    use std::os::unix::fs::FileExt;
    let mut done = 0;
    while done < buf.len() {
        match file.read_at(&mut buf[done..], offset + done as u64) {
            Ok(0) => break,
            Ok(k) => done += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(done)
}

#[cfg(windows)]
fn read_at_most(file: &File, buf: &mut [u8], offset: u64) -> io::Result<usize> {
    use std::os::windows::fs::FileExt;
    let mut done = 0;
    while done < buf.len() {
        match file.seek_read(&mut buf[done..], offset + done as u64) {
            Ok(0) => break,
            Ok(k) => done += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(done)
}

fn read_exact_at(file: &File, buf: &mut [u8], offset: u64) -> io::Result<()> {
    if read_at_most(file, buf, offset)? < buf.len() {
        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "short read"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_synthetic;

    fn store(n: usize, d: usize, mode: IoMode) -> (tempfile::TempDir, VectorDataset, FullViewStore) {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(n, d, 4, 3).unwrap();
        let s = write_store(&ds, dir.path().join("fv.bin"), mode).unwrap();
        (dir, ds, s)
    }

    #[test]
    fn layout_and_roundtrip() {
        for mode in [IoMode::Direct, IoMode::Buffered] {
            let (dir, ds, s) = store(300, 12, mode);
            let size = fs::metadata(dir.path().join("fv.bin")).unwrap().len();
            assert_eq!(size, HEADER_BYTES + 300 * 12 * 4);
            assert!(!partial_path(&dir.path().join("fv.bin")).exists());
            let got = s.read_batch(&[0], RerankPlan::covering(1, 1)).unwrap();
            assert_eq!(got, vec![(0, ds.row(0).to_vec())]);
            let last = s.read_batch(&[299], RerankPlan::covering(1, 1)).unwrap();
            assert_eq!(last[0].1, ds.row(299));
        }
    }

    #[test]
    fn duplicates_are_returned_per_occurrence() {
        let (_dir, ds, s) = store(50, 4, IoMode::Direct);
        let got = s.read_batch(&[5, 5, 7], RerankPlan::covering(2, 3)).unwrap();
        assert_eq!(got.len(), 3);
        assert_eq!(got.iter().filter(|(id, v)| *id == 5 && v == ds.row(5)).count(), 2);
    }

    #[test]
    fn argument_errors() {
        let (_dir, _ds, s) = store(10, 4, IoMode::Buffered);
        assert!(matches!(s.read_batch(&[10], RerankPlan::covering(1, 1)), Err(Error::Argument(_))));
        assert!(s.read_batch(&[1, 2, 3], RerankPlan { batch: 1, submissions: 2 }).is_err());
        assert!(s.rerank(&[0.0; 4], &[1, 2], 3, RerankPlan::covering(2, 2)).is_err());
        assert!(s.rerank(&[0.0; 3], &[1, 2], 1, RerankPlan::covering(2, 2)).is_err());
    }

    #[test]
    fn open_rejects_corruption() {
        let (dir, _ds, _s) = store(10, 4, IoMode::Buffered);
        let p = dir.path().join("fv.bin");
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = b'X';
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(FullViewStore::open(&p, IoMode::Buffered), Err(Error::Format { .. })));
        bytes[0] = b'Z';
        bytes.pop();
        fs::write(&p, &bytes).unwrap();
        assert!(FullViewStore::open(&p, IoMode::Buffered).is_err());
    }

    #[test]
    fn plan_coverage() {
        assert_eq!(RerankPlan::covering(1, 1), RerankPlan { batch: 1, submissions: 1 });
        assert_eq!(RerankPlan::covering(8, 100), RerankPlan { batch: 8, submissions: 13 });
        for b in 1..40 {
            assert!(RerankPlan::covering(b, 37).capacity() >= 37);
        }
    }

    #[test]
    fn autotune_single_candidate() {
        let (_dir, _ds, s) = store(20, 4, IoMode::Direct);
        assert_eq!(s.autotune_plan(1).unwrap(), RerankPlan { batch: 1, submissions: 1 });
        let p = s.autotune_plan(10).unwrap();
        assert!(p.capacity() >= 10);
    }

    #[test]
    fn aligned_spans_cover_records() {
        let (_dir, _ds, s) = store(2000, 20, IoMode::Direct);
        for id in [0u32, 1, 50, 51, 1023, 1999] {
            let (start, len) = s.aligned_span(id);
            assert_eq!(start % 4096, 0);
            assert_eq!(len % 4096, 0);
            assert!(start <= s.record_offset(id));
            assert!(start + len as u64 >= s.record_offset(id) + 80);
            assert!(len <= s.slot_bytes());
        }
    }
}
