//! First-level coarse partitioning with Lloyd's k-means.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::VectorDataset;
use crate::distance::l2_sq;
use crate::error::{Error, Result};

/// Above this many points, training runs on a sample of
/// `SAMPLE_PER_CENTROID * k` points and the full set is assigned afterwards.
pub const SUBSAMPLE_THRESHOLD: usize = 1_000_000;
pub const SAMPLE_PER_CENTROID: usize = 256;

/// Trained centroids plus the assignment of every database vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    d: usize,
    centroids: Vec<f32>,
    assignments: Vec<u32>,
    sizes: Vec<usize>,
    objective_history: Vec<f64>,
}

impl ClusterModel {
    /// A model with the given centroids and no assigned vectors.
    pub fn from_centroids(d: usize, centroids: Vec<f32>) -> Result<Self> {
        if d == 0 || centroids.is_empty() || !centroids.len().is_multiple_of(d) {
            return Err(Error::arg("centroid table must be a non-empty multiple of d"));
        }
        let k = centroids.len() / d;
        Ok(Self {
            d,
            centroids,
            assignments: Vec::new(),
            sizes: vec![0; k],
            objective_history: Vec::new(),
        })
    }

    /// Rebuilds a model from centroids and per-vector assignments.
    pub fn from_parts(d: usize, centroids: Vec<f32>, assignments: Vec<u32>) -> Result<Self> {
        let mut model = Self::from_centroids(d, centroids)?;
        for &a in &assignments {
            let slot = model
                .sizes
                .get_mut(a as usize)
                .ok_or_else(|| Error::arg(format!("assignment {a} out of range")))?;
            *slot += 1;
        }
        model.assignments = assignments;
        Ok(model)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n_cluster(&self) -> usize {
        self.centroids.len() / self.d
    }

    #[inline]
    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.d..(c + 1) * self.d]
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn assignments(&self) -> &[u32] {
        &self.assignments
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Objective after each assignment step; the first entry follows
    /// seeding. Empty for models not produced by training.
    pub fn objective_history(&self) -> &[f64] {
        &self.objective_history
    }

    /// Nearest centroid and its squared distance, ties to the lower id.
    pub fn assign(&self, v: &[f32]) -> Result<(u32, f32)> {
        if v.len() != self.d {
            return Err(Error::arg(format!("vector has dimension {}, model has {}", v.len(), self.d)));
        }
        Ok(nearest(&self.centroids, self.d, v))
    }
}

#[inline]
pub(crate) fn nearest(centroids: &[f32], d: usize, v: &[f32]) -> (u32, f32) {
    let mut best = (0u32, f32::INFINITY);
    for (c, centroid) in centroids.chunks_exact(d).enumerate() {
        let dist = l2_sq(v, centroid);
        if dist < best.1 {
            best = (c as u32, dist);
        }
    }
    best
}

/// Result of raw Lloyd iterations over a flat row-major buffer.
pub(crate) struct Lloyd {
    pub centroids: Vec<f32>,
    pub labels: Vec<u32>,
    pub sizes: Vec<usize>,
    pub history: Vec<f64>,
}

/// k-means++ seeding followed by at most `max_iters` update/assign rounds.
/// Stops early once an assignment step changes no label.
pub(crate) fn lloyd(data: &[f32], d: usize, k: usize, max_iters: usize, rng: &mut ChaCha8Rng) -> Lloyd {
    let n = data.len() / d;
    debug_assert!(k >= 1 && k <= n);
    let row = |i: usize| &data[i * d..(i + 1) * d];

    let mut centroids = plus_plus_seed(data, d, k, rng);
    let mut labels = vec![u32::MAX; n];
    let mut sizes = vec![0usize; k];
    let mut history = Vec::with_capacity(max_iters + 1);

    let assign_all = |centroids: &[f32], labels: &mut [u32], sizes: &mut [usize]| {
        let mut changed = 0usize;
        let mut objective = 0.0f64;
        sizes.iter_mut().for_each(|s| *s = 0);
        for (i, label) in labels.iter_mut().enumerate() {
            let (c, dist) = nearest(centroids, d, row(i));
            if *label != c {
                *label = c;
                changed += 1;
            }
            sizes[c as usize] += 1;
            objective += dist as f64;
        }
        (changed, objective)
    };

    let (_, objective) = assign_all(&centroids, &mut labels, &mut sizes);
    history.push(objective);

    let mut sums = vec![0.0f64; k * d];
    for _ in 0..max_iters {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for (i, &label) in labels.iter().enumerate() {
            let acc = &mut sums[label as usize * d..(label as usize + 1) * d];
            for (a, x) in acc.iter_mut().zip(row(i)) {
                *a += *x as f64;
            }
        }
        for c in 0..k {
            if sizes[c] > 0 {
                let inv = sizes[c] as f64;
                for j in 0..d {
                    centroids[c * d + j] = (sums[c * d + j] / inv) as f32;
                }
            }
        }
        repair_empty(data, d, &mut centroids, &mut labels, &mut sizes);

        let (changed, objective) = assign_all(&centroids, &mut labels, &mut sizes);
        history.push(objective);
        if changed == 0 {
            break;
        }
    }

    Lloyd { centroids, labels, sizes, history }
}

/// Greedy k-means++: each step draws `2 + floor(ln k)` candidates by D²
/// sampling and keeps the one that lowers the total potential most.
fn plus_plus_seed(data: &[f32], d: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = data.len() / d;
    let row = |i: usize| &data[i * d..(i + 1) * d];
    let trials = 2 + (k as f64).ln() as usize;
    let mut centroids = Vec::with_capacity(k * d);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut weight: Vec<f64> = (0..n).map(|i| l2_sq(row(i), row(first)) as f64).collect();
    let mut candidate = vec![0.0f64; n];
    let mut best_weight = vec![0.0f64; n];

    for _ in 1..k {
        let total: f64 = weight.iter().sum();
        let mut best: Option<(f64, usize)> = None;
        for _ in 0..trials {
            let pick = if total > 0.0 { d2_sample(&weight, total, rng) } else { rng.random_range(0..n) };
            let c = row(pick);
            let mut potential = 0.0;
            for (i, (w, slot)) in weight.iter().zip(candidate.iter_mut()).enumerate() {
                *slot = w.min(l2_sq(row(i), c) as f64);
                potential += *slot;
            }
            if best.is_none_or(|(p, _)| potential < p) {
                best = Some((potential, pick));
                std::mem::swap(&mut best_weight, &mut candidate);
            }
        }
        let (_, pick) = best.unwrap();
        std::mem::swap(&mut weight, &mut best_weight);
        centroids.extend_from_slice(row(pick));
    }
    centroids
}

fn d2_sample(weight: &[f64], total: f64, rng: &mut ChaCha8Rng) -> usize {
    let target = rng.random_range(0.0..total);
    let mut acc = 0.0;
    for (i, &w) in weight.iter().enumerate() {
        acc += w;
        if w > 0.0 && acc > target {
            return i;
        }
    }
    // rounding can leave `target` past the final partial sum
    weight.iter().rposition(|&w| w > 0.0).unwrap()
}

/// Re-seeds each empty cluster with the point of the current largest
/// cluster that lies farthest from that cluster's centroid.
fn repair_empty(data: &[f32], d: usize, centroids: &mut [f32], labels: &mut [u32], sizes: &mut [usize]) {
    let k = sizes.len();
    for empty in 0..k {
        if sizes[empty] != 0 {
            continue;
        }
        let largest = (0..k).max_by_key(|&c| (sizes[c], std::cmp::Reverse(c))).unwrap();
        if sizes[largest] < 2 {
            return;
        }
        let center = centroids[largest * d..(largest + 1) * d].to_vec();
        let mut far = (usize::MAX, -1.0f32);
        for (i, &label) in labels.iter().enumerate() {
            if label as usize == largest {
                let dist = l2_sq(&data[i * d..(i + 1) * d], &center);
                if dist > far.1 {
                    far = (i, dist);
                }
            }
        }
        let i = far.0;
        centroids[empty * d..(empty + 1) * d].copy_from_slice(&data[i * d..(i + 1) * d]);
        labels[i] = empty as u32;
        sizes[largest] -= 1;
        sizes[empty] = 1;
    }
}

/// Lloyd's k-means with k-means++ seeding over the whole dataset.
pub fn kmeans_train(dataset: &VectorDataset, k: usize, max_iters: usize, seed: u64) -> Result<ClusterModel> {
    let n = dataset.n();
    let d = dataset.d();
    if k == 0 || k > n {
        return Err(Error::arg(format!("k={k} must be in 1..={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (centroids, history) = match training_sample(n, k, &mut rng) {
        None => {
            let run = lloyd(dataset.as_slice(), d, k, max_iters, &mut rng);
            let model = ClusterModel {
                d,
                centroids: run.centroids,
                assignments: run.labels,
                sizes: run.sizes,
                objective_history: run.history,
            };
            return Ok(model);
        }
        Some(ids) => {
            let sample = dataset.subset(&ids)?;
            let run = lloyd(sample.as_slice(), d, k, max_iters, &mut rng);
            (run.centroids, run.history)
        }
    };
    let mut assignments = Vec::with_capacity(n);
    let mut sizes = vec![0usize; k];
    for row in dataset.rows() {
        let (c, _) = nearest(&centroids, d, row);
        assignments.push(c);
        sizes[c as usize] += 1;
    }
    Ok(ClusterModel { d, centroids, assignments, sizes, objective_history: history })
}

/// Sorted sample ids when `n` is large enough to warrant subsampling.
pub(crate) fn training_sample(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
    let target = SAMPLE_PER_CENTROID.saturating_mul(k);
    if n <= SUBSAMPLE_THRESHOLD || target >= n {
        return None;
    }
    let mut ids = sample(rng, n, target).into_vec();
    ids.sort_unstable();
    Some(ids)
}

/// Per-vector residuals `y_i - c_{assignment(i)}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    d: usize,
    data: Vec<f32>,
}

impl Residuals {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.data.len() / self.d
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

pub fn compute_residuals(dataset: &VectorDataset, model: &ClusterModel) -> Result<Residuals> {
    if dataset.d() != model.d() || model.assignments().len() != dataset.n() {
        return Err(Error::arg("cluster model does not describe this dataset"));
    }
    let d = dataset.d();
    let mut data = Vec::with_capacity(dataset.n() * d);
    for (row, &c) in dataset.rows().zip(model.assignments()) {
        data.extend(row.iter().zip(model.centroid(c as usize)).map(|(y, c)| y - c));
    }
    Ok(Residuals { d, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_synthetic;

    fn objective(ds: &VectorDataset, m: &ClusterModel) -> f64 {
        ds.rows()
            .zip(m.assignments())
            .map(|(r, &c)| l2_sq(r, m.centroid(c as usize)) as f64)
            .sum()
    }

    #[test]
    fn k_equals_n_gives_zero_objective() {
        let ds = generate_synthetic(30, 4, 3, 2).unwrap();
        let m = kmeans_train(&ds, 30, 25, 9).unwrap();
        assert_eq!(objective(&ds, &m), 0.0);
        assert!(m.sizes().iter().all(|&s| s == 1));
    }

    #[test]
    fn k_one_is_the_mean() {
        let ds = generate_synthetic(200, 5, 4, 3).unwrap();
        let m = kmeans_train(&ds, 1, 25, 1).unwrap();
        for j in 0..5 {
            let mean: f64 = ds.rows().map(|r| r[j] as f64).sum::<f64>() / 200.0;
            assert!((m.centroid(0)[j] as f64 - mean).abs() < 1e-5);
        }
        assert!(m.assignments().iter().all(|&a| a == 0));
    }

    #[test]
    fn objective_is_monotone_and_sizes_sum() {
        let ds = generate_synthetic(2000, 8, 10, 4).unwrap();
        let m = kmeans_train(&ds, 16, 25, 5).unwrap();
        let h = m.objective_history();
        assert!(h.len() >= 2);
        for w in h.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9), "{h:?}");
        }
        assert_eq!(m.sizes().iter().sum::<usize>(), 2000);
        assert!(m.sizes().iter().all(|&s| s > 0));
        assert!((h.last().unwrap() - objective(&ds, &m)).abs() < 1e-6 * h.last().unwrap());
    }

    #[test]
    fn training_is_idempotent_and_deterministic() {
        let ds = generate_synthetic(1000, 6, 5, 8).unwrap();
        let a = kmeans_train(&ds, 12, 25, 77).unwrap();
        let b = kmeans_train(&ds, 12, 25, 77).unwrap();
        assert_eq!(a, b);
        for (row, &c) in ds.rows().zip(a.assignments()) {
            assert_eq!(a.assign(row).unwrap().0, c);
        }
    }

    #[test]
    fn k_greater_than_n_is_rejected() {
        let ds = generate_synthetic(5, 2, 1, 1).unwrap();
        assert!(matches!(kmeans_train(&ds, 6, 10, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn duplicate_points_do_not_break_seeding() {
        let ds = VectorDataset::new(2, vec![0.0; 20]).unwrap();
        let m = kmeans_train(&ds, 4, 10, 3).unwrap();
        assert_eq!(m.n_cluster(), 4);
        assert_eq!(objective(&ds, &m), 0.0);
    }

    #[test]
    fn empty_cluster_repair_takes_farthest_of_largest() {
        let data = vec![0.0, 1.0, 2.0, 10.0];
        let mut centroids = vec![1.0, 50.0];
        let mut labels = vec![0, 0, 0, 0];
        let mut sizes = vec![4, 0];
        repair_empty(&data, 1, &mut centroids, &mut labels, &mut sizes);
        assert_eq!(centroids[1], 10.0);
        assert_eq!(labels, vec![0, 0, 0, 1]);
        assert_eq!(sizes, vec![3, 1]);
    }

    #[test]
    fn assign_exact_hits_and_single_cluster() {
        let m = ClusterModel::from_centroids(2, vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0]).unwrap();
        assert_eq!(m.assign(&[3.0, 3.0]).unwrap(), (3, 0.0));
        assert!(m.assign(&[1.0]).is_err());
        let one = ClusterModel::from_centroids(2, vec![5.0, 5.0]).unwrap();
        assert_eq!(one.assign(&[-100.0, 3.0]).unwrap().0, 0);
    }

    #[test]
    fn residual_of_a_centroid_is_zero() {
        let ds = VectorDataset::new(2, vec![1.0, 2.0, 1.5, 2.5]).unwrap();
        let m = ClusterModel::from_parts(2, vec![1.0, 2.0], vec![0, 0]).unwrap();
        let r = compute_residuals(&ds, &m).unwrap();
        assert_eq!(r.row(0), &[0.0, 0.0]);
        assert_eq!(r.row(1), &[0.5, 0.5]);
    }
}
