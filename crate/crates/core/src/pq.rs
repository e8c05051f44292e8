//! Residual product quantization and the cluster-scanning kernel.
//!
//! The squared ADC distance between a query `q` and a vector encoded as
//! centroid `c` plus quantized residual `r̂` splits into four terms:
//!
//! ```text
//! ‖q − c − r̂‖² = ‖q − c‖²          (A: once per scanned cluster)
//!              + Σ_j ‖r̂ʲ‖²          (B: per vector, query independent)
//!              + 2 Σ_j ⟨cʲ, r̂ʲ⟩     (C: per vector, query independent)
//!              − 2 Σ_j ⟨qʲ, r̂ʲ⟩     (D: per-query lookup table)
//! ```
//!
//! B + C is cached per vector at build time, so the scan does `m + 1`
//! lookup-adds per vector on top of the per-cluster term A.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::clustering::{lloyd, training_sample, ClusterModel, Residuals};
use crate::distance::{dot, l2_sq};
use crate::error::{Error, Result};
use crate::topk::BoundedMaxHeap;

#[cfg(not(feature = "f64-accumulator"))]
type Acc = f32;
#[cfg(feature = "f64-accumulator")]
type Acc = f64;

/// `m` sub-codebooks of `l` codewords, each `d / m` wide.
#[derive(Debug, Clone, PartialEq)]
pub struct PQCodebook {
    d: usize,
    m: usize,
    l: usize,
    sub_dim: usize,
    tables: Vec<f32>,
}

/// One code byte per sub-dimension.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PQCode(pub Vec<u8>);

impl PQCodebook {
    /// Wraps raw tables laid out as `[m][l][sub_dim]`.
    pub fn from_tables(d: usize, m: usize, l: usize, tables: Vec<f32>) -> Result<Self> {
        if m == 0 || !d.is_multiple_of(m) || l == 0 || l > 256 {
            return Err(Error::arg(format!("invalid codebook shape d={d} m={m} l={l}")));
        }
        if tables.len() != d * l {
            return Err(Error::arg(format!("codebook tables need {} floats, got {}", d * l, tables.len())));
        }
        Ok(Self { d, m, l, sub_dim: d / m, tables })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn sub_dim(&self) -> usize {
        self.sub_dim
    }

    pub fn tables(&self) -> &[f32] {
        &self.tables
    }

    #[inline]
    pub fn codeword(&self, j: usize, v: usize) -> &[f32] {
        let start = (j * self.l + v) * self.sub_dim;
        &self.tables[start..start + self.sub_dim]
    }

    fn check_dim(&self, v: &[f32]) -> Result<()> {
        if v.len() != self.d {
            return Err(Error::arg(format!("vector has dimension {}, codebook has {}", v.len(), self.d)));
        }
        Ok(())
    }

    fn check_code(&self, code: &[u8]) -> Result<()> {
        if code.len() != self.m {
            return Err(Error::arg(format!("code has {} entries, expected {}", code.len(), self.m)));
        }
        if let Some(bad) = code.iter().find(|&&c| c as usize >= self.l) {
            return Err(Error::arg(format!("code entry {bad} out of range for l={}", self.l)));
        }
        Ok(())
    }

    /// Nearest codeword per sub-dimension slice, ties to the lower index.
    pub fn encode(&self, residual: &[f32]) -> Result<PQCode> {
        self.check_dim(residual)?;
        let mut out = vec![0u8; self.m];
        self.encode_into(residual, &mut out);
        Ok(PQCode(out))
    }

    pub(crate) fn encode_into(&self, residual: &[f32], out: &mut [u8]) {
        for (j, slot) in out.iter_mut().enumerate() {
            let sub = &residual[j * self.sub_dim..(j + 1) * self.sub_dim];
            let mut best = (0usize, f32::INFINITY);
            for v in 0..self.l {
                let dist = l2_sq(sub, self.codeword(j, v));
                if dist < best.1 {
                    best = (v, dist);
                }
            }
            *slot = best.0 as u8;
        }
    }

    /// Concatenation of the indexed codewords.
    pub fn decode(&self, code: &PQCode) -> Result<Vec<f32>> {
        self.check_code(&code.0)?;
        let mut out = Vec::with_capacity(self.d);
        for (j, &c) in code.0.iter().enumerate() {
            out.extend_from_slice(self.codeword(j, c as usize));
        }
        Ok(out)
    }

    /// Term B + Term C: `Σ_j ‖c_jʲ‖² + 2 Σ_j ⟨centroidʲ, c_jʲ⟩`.
    pub fn precompute_term(&self, centroid: &[f32], code: &PQCode) -> Result<f32> {
        self.check_dim(centroid)?;
        self.check_code(&code.0)?;
        Ok(self.cached_term(centroid, &code.0))
    }

    #[inline]
    pub(crate) fn cached_term(&self, centroid: &[f32], code: &[u8]) -> f32 {
        let mut sum = 0.0f64;
        for (j, &c) in code.iter().enumerate() {
            let w = self.codeword(j, c as usize);
            let cj = &centroid[j * self.sub_dim..(j + 1) * self.sub_dim];
            for (x, y) in w.iter().zip(cj) {
                let (x, y) = (*x as f64, *y as f64);
                sum += x * x + 2.0 * x * y;
            }
        }
        sum as f32
    }

    /// Term-D table: `entry[j][v] = −2⟨qʲ, c_vʲ⟩`.
    pub fn build_termd_lut(&self, query: &[f32]) -> Result<TermDLut> {
        self.check_dim(query)?;
        let mut table = Vec::with_capacity(self.m * self.l);
        for j in 0..self.m {
            let qj = &query[j * self.sub_dim..(j + 1) * self.sub_dim];
            for v in 0..self.l {
                table.push(-2.0 * dot(qj, self.codeword(j, v)));
            }
        }
        Ok(TermDLut { m: self.m, l: self.l, table })
    }

    /// Reference ADC: `Σ_j ‖(q − c)ʲ − c_jʲ‖²`.
    pub fn adc_naive(&self, query: &[f32], centroid: &[f32], code: &PQCode) -> Result<f32> {
        self.check_dim(query)?;
        self.check_dim(centroid)?;
        self.check_code(&code.0)?;
        Ok(self.adc_naive_unchecked(query, centroid, &code.0))
    }

    #[inline]
    fn adc_naive_unchecked(&self, query: &[f32], centroid: &[f32], code: &[u8]) -> f32 {
        let mut sum = 0.0f32;
        for (j, &c) in code.iter().enumerate() {
            let w = self.codeword(j, c as usize);
            let range = j * self.sub_dim..(j + 1) * self.sub_dim;
            for ((q, c), w) in query[range.clone()].iter().zip(&centroid[range]).zip(w) {
                let t = (q - c) - w;
                sum += t * t;
            }
        }
        sum
    }
}

/// Per-query Term-D lookup table, `m × l`.
#[derive(Debug, Clone, PartialEq)]
pub struct TermDLut {
    m: usize,
    l: usize,
    table: Vec<f32>,
}

impl TermDLut {
    #[inline]
    pub fn get(&self, j: usize, v: usize) -> f32 {
        self.table[j * self.l + v]
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn l(&self) -> usize {
        self.l
    }

    /// Σ_j entry[j][code[j]].
    pub fn lookup(&self, code: &[u8]) -> f32 {
        let mut acc: Acc = 0.0;
        for (j, &c) in code.iter().enumerate() {
            acc += self.table[j * self.l + c as usize] as Acc;
        }
        acc as f32
    }
}

/// Independent k-means (k = `l`) on each `d / m` slice of the residuals.
/// Sub-codebook `j` is seeded with `seed + j`.
pub fn train_codebooks(residuals: &Residuals, m: usize, l: usize, max_iters: usize, seed: u64) -> Result<PQCodebook> {
    let d = residuals.d();
    let n = residuals.n();
    if m == 0 || !d.is_multiple_of(m) {
        return Err(Error::arg(format!("m={m} must divide d={d}")));
    }
    if l == 0 || l > 256 || l > n {
        return Err(Error::arg(format!("l={l} must be in 1..=min(256, n={n})")));
    }
    let sub_dim = d / m;
    let mut tables = Vec::with_capacity(d * l);
    for j in 0..m {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(j as u64));
        let rows: Vec<usize> = training_sample(n, l, &mut rng).unwrap_or_else(|| (0..n).collect());
        let mut slice = Vec::with_capacity(rows.len() * sub_dim);
        for &i in &rows {
            slice.extend_from_slice(&residuals.row(i)[j * sub_dim..(j + 1) * sub_dim]);
        }
        let run = lloyd(&slice, sub_dim, l, max_iters, &mut rng);
        tables.extend_from_slice(&run.centroids);
    }
    PQCodebook::from_tables(d, m, l, tables)
}

/// One cluster's encoded vectors as parallel arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InvertedList {
    pub ids: Vec<u32>,
    /// `ids.len() * m` code bytes.
    pub codes: Vec<u8>,
    /// Cached Term B + Term C per vector.
    pub cached: Vec<f32>,
}

impl InvertedList {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Per-cluster lists of (id, code, cached term).
#[derive(Debug, Clone, PartialEq)]
pub struct InvertedLists {
    m: usize,
    lists: Vec<InvertedList>,
}

impl InvertedLists {
    /// Encodes every residual and files it under its assigned cluster, in id
    /// order.
    pub fn build(codebook: &PQCodebook, clusters: &ClusterModel, residuals: &Residuals) -> Result<Self> {
        let m = codebook.m();
        if residuals.d() != codebook.d() || clusters.assignments().len() != residuals.n() {
            return Err(Error::arg("residuals, clusters and codebook disagree"));
        }
        let mut lists: Vec<InvertedList> = clusters
            .sizes()
            .iter()
            .map(|&s| InvertedList {
                ids: Vec::with_capacity(s),
                codes: Vec::with_capacity(s * m),
                cached: Vec::with_capacity(s),
            })
            .collect();
        let mut code = vec![0u8; m];
        for (i, &c) in clusters.assignments().iter().enumerate() {
            codebook.encode_into(residuals.row(i), &mut code);
            let list = &mut lists[c as usize];
            list.ids.push(i as u32);
            list.codes.extend_from_slice(&code);
            list.cached.push(codebook.cached_term(clusters.centroid(c as usize), &code));
        }
        Ok(Self { m, lists })
    }

    pub fn from_lists(m: usize, lists: Vec<InvertedList>) -> Result<Self> {
        for l in &lists {
            if l.codes.len() != l.ids.len() * m || l.cached.len() != l.ids.len() {
                return Err(Error::arg("inverted list arrays are not parallel"));
            }
        }
        Ok(Self { m, lists })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n_cluster(&self) -> usize {
        self.lists.len()
    }

    pub fn list(&self, c: usize) -> &InvertedList {
        &self.lists[c]
    }

    pub fn lists(&self) -> &[InvertedList] {
        &self.lists
    }

    pub fn total_len(&self) -> usize {
        self.lists.iter().map(InvertedList::len).sum()
    }
}

fn check_selected(lists: &InvertedLists, selected: &[(u32, f32)], r: usize) -> Result<()> {
    if r == 0 {
        return Err(Error::arg("candidate list size r must be at least 1"));
    }
    if let Some(&(c, _)) = selected.iter().find(|(c, _)| *c as usize >= lists.n_cluster()) {
        return Err(Error::arg(format!("selected cluster {c} out of range")));
    }
    Ok(())
}

/// Top-`r` (id, estimated squared distance) over the selected clusters,
/// ascending. `selected` carries exact squared query-to-centroid distances
/// (Term A). Ties at the cut keep the first vector encountered.
#[allow(clippy::unnecessary_cast)]
pub fn scan_pq_vectors(
    lists: &InvertedLists,
    codebook: &PQCodebook,
    selected: &[(u32, f32)],
    query: &[f32],
    r: usize,
) -> Result<Vec<(u32, f32)>> {
    check_selected(lists, selected, r)?;
    let lut = codebook.build_termd_lut(query)?;
    let (m, l) = (lut.m, lut.l);
    let table = &lut.table[..];
    let mut top = BoundedMaxHeap::new(r);
    let mut seq = 0u64;
    for &(c, term_a) in selected {
        let list = lists.list(c as usize);
        for ((id, code), cached) in list.ids.iter().zip(list.codes.chunks_exact(m)).zip(&list.cached) {
            let mut acc = term_a as Acc + *cached as Acc;
            for (j, &v) in code.iter().enumerate() {
                acc += table[j * l + v as usize] as Acc;
            }
            top.push(acc as f32, seq, *id);
            seq += 1;
        }
    }
    Ok(top.into_sorted().into_iter().map(|e| (e.id, e.dist)).collect())
}

/// The same scan computing every estimate with [`PQCodebook::adc_naive`];
/// the reference the cached path is checked against.
pub fn scan_pq_vectors_naive(
    lists: &InvertedLists,
    codebook: &PQCodebook,
    clusters: &ClusterModel,
    selected: &[(u32, f32)],
    query: &[f32],
    r: usize,
) -> Result<Vec<(u32, f32)>> {
    check_selected(lists, selected, r)?;
    codebook.check_dim(query)?;
    let m = codebook.m();
    let mut top = BoundedMaxHeap::new(r);
    let mut seq = 0u64;
    for &(c, _) in selected {
        let centroid = clusters.centroid(c as usize);
        let list = lists.list(c as usize);
        for (id, code) in list.ids.iter().zip(list.codes.chunks_exact(m)) {
            top.push(codebook.adc_naive_unchecked(query, centroid, code), seq, *id);
            seq += 1;
        }
    }
    Ok(top.into_sorted().into_iter().map(|e| (e.id, e.dist)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::{compute_residuals, kmeans_train};
    use crate::dataset::{generate_synthetic, VectorDataset};
    use rand::Rng;

    fn book(d: usize, m: usize, l: usize, seed: u64) -> PQCodebook {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = (0..d * l).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        PQCodebook::from_tables(d, m, l, t).unwrap()
    }

    #[test]
    fn encode_exact_codewords() {
        let cb = book(8, 4, 16, 1);
        let wanted = [3u8, 9, 0, 15];
        let mut r = Vec::new();
        for (j, &c) in wanted.iter().enumerate() {
            r.extend_from_slice(cb.codeword(j, c as usize));
        }
        let code = cb.encode(&r).unwrap();
        assert_eq!(code.0, wanted);
        assert_eq!(cb.decode(&code).unwrap(), r);
    }

    #[test]
    fn single_codeword_encodes_to_zero() {
        let cb = book(6, 3, 1, 2);
        assert_eq!(cb.encode(&[5.0, -1.0, 2.0, 0.0, 9.0, 1.0]).unwrap().0, vec![0, 0, 0]);
    }

    #[test]
    fn decode_rejects_out_of_range_entries() {
        let cb = book(4, 2, 4, 3);
        assert!(cb.decode(&PQCode(vec![0, 4])).is_err());
        assert!(cb.decode(&PQCode(vec![0])).is_err());
        let zero = PQCodebook::from_tables(4, 2, 4, vec![0.0; 16]).unwrap();
        assert_eq!(zero.decode(&PQCode(vec![1, 3])).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn precompute_term_special_cases() {
        let zero = PQCodebook::from_tables(4, 2, 2, vec![0.0; 8]).unwrap();
        assert_eq!(zero.precompute_term(&[1.0, 2.0, 3.0, 4.0], &PQCode(vec![1, 0])).unwrap(), 0.0);
        let cb = book(4, 2, 2, 5);
        let code = PQCode(vec![1, 0]);
        let norm: f32 = cb.decode(&code).unwrap().iter().map(|x| x * x).sum();
        let got = cb.precompute_term(&[0.0; 4], &code).unwrap();
        assert!((got - norm).abs() < 1e-6);
    }

    #[test]
    fn lut_edge_cases() {
        let cb = book(4, 2, 8, 7);
        let lut = cb.build_termd_lut(&[0.0; 4]).unwrap();
        assert!(lut.table.iter().all(|&x| x == 0.0));
        let one = PQCodebook::from_tables(3, 1, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let lut = one.build_termd_lut(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(lut.get(0, 0), -12.0);
    }

    #[test]
    fn adc_naive_zero_and_definition() {
        let zero = PQCodebook::from_tables(4, 2, 2, vec![0.0; 8]).unwrap();
        let c = [0.5, 1.0, -2.0, 3.0];
        assert_eq!(zero.adc_naive(&c, &c, &PQCode(vec![0, 1])).unwrap(), 0.0);
        // exact distance when y is c plus the decoded residual
        let cb = PQCodebook::from_tables(2, 2, 2, vec![0.5, 1.0, 0.25, -0.5]).unwrap();
        let code = PQCode(vec![1, 0]);
        let y: Vec<f32> = c[..2].iter().zip(cb.decode(&code).unwrap()).map(|(a, b)| a + b).collect();
        let q = [2.0f32, -1.0];
        assert_eq!(cb.adc_naive(&q, &c[..2], &code).unwrap(), l2_sq(&q, &y));
    }

    #[test]
    fn training_degenerate_cases() {
        let ds = generate_synthetic(40, 8, 4, 3).unwrap();
        let model = ClusterModel::from_parts(8, vec![0.0; 8], vec![0; 40]).unwrap();
        let res = compute_residuals(&ds, &model).unwrap();
        // n == l: every training residual is a lattice point
        let cb = train_codebooks(&res, 4, 40, 25, 1).unwrap();
        for i in 0..40 {
            let code = cb.encode(res.row(i)).unwrap();
            assert_eq!(cb.decode(&code).unwrap(), res.row(i));
        }
        // m == 1 reduces to plain k-means with the same seed
        let cb1 = train_codebooks(&res, 1, 5, 25, 9).unwrap();
        let km = kmeans_train(&VectorDataset::new(8, res.as_slice().to_vec()).unwrap(), 5, 25, 9).unwrap();
        assert_eq!(cb1.tables(), km.centroids());
        assert!(train_codebooks(&res, 4, 41, 25, 1).is_err());
        assert!(train_codebooks(&res, 3, 4, 25, 1).is_err());
    }

    #[test]
    fn scan_singleton_and_no_truncation() {
        let ds = generate_synthetic(60, 4, 3, 4).unwrap();
        let clusters = kmeans_train(&ds, 3, 25, 4).unwrap();
        let res = compute_residuals(&ds, &clusters).unwrap();
        let cb = train_codebooks(&res, 2, 8, 25, 4).unwrap();
        let lists = InvertedLists::build(&cb, &clusters, &res).unwrap();
        assert_eq!(lists.total_len(), 60);
        let q = ds.row(7);
        let selected: Vec<(u32, f32)> =
            (0..3).map(|c| (c, l2_sq(q, clusters.centroid(c as usize)))).collect();
        let all = scan_pq_vectors(&lists, &cb, &selected, q, 1000).unwrap();
        assert_eq!(all.len(), 60);
        assert!(all.windows(2).all(|w| w[0].1 <= w[1].1));
        assert!(scan_pq_vectors(&lists, &cb, &selected, q, 0).is_err());

        let single = InvertedLists::from_lists(
            2,
            vec![InvertedList { ids: vec![42], codes: vec![1, 2], cached: vec![cb.cached_term(&[0.0; 4], &[1, 2])] }],
        )
        .unwrap();
        let got = scan_pq_vectors(&single, &cb, &[(0, l2_sq(q, &[0.0; 4]))], q, 5).unwrap();
        let want = cb.adc_naive(q, &[0.0; 4], &PQCode(vec![1, 2])).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].0, 42);
        assert!((got[0].1 - want).abs() <= 1e-4 * (1.0 + want));
    }
}
