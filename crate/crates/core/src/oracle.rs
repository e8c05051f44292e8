//! Exact brute-force k-nearest-neighbor search.

use crate::dataset::VectorDataset;
use crate::distance::l2_sq;
use crate::error::{Error, Result};
use crate::topk::BoundedMaxHeap;

/// A result entry: vector id and squared L2 distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: u32,
    pub dist: f32,
}

/// The `k` nearest rows of `dataset` to `query`, ascending by squared
/// distance with ties broken by lower id.
pub fn exact_topk(dataset: &VectorDataset, query: &[f32], k: usize) -> Result<Vec<Neighbor>> {
    if query.len() != dataset.d() {
        return Err(Error::arg(format!(
            "query has dimension {}, dataset has {}",
            query.len(),
            dataset.d()
        )));
    }
    if k == 0 || k > dataset.n() {
        return Err(Error::arg(format!("k={k} must be in 1..={}", dataset.n())));
    }
    let mut heap = BoundedMaxHeap::new(k);
    for (i, row) in dataset.rows().enumerate() {
        heap.push(l2_sq(query, row), i as u64, i as u32);
    }
    Ok(heap
        .into_sorted()
        .into_iter()
        .map(|e| Neighbor { id: e.id, dist: e.dist })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_synthetic;

    #[test]
    fn self_match_first() {
        let ds = generate_synthetic(50, 8, 3, 11).unwrap();
        let res = exact_topk(&ds, ds.row(5), 3).unwrap();
        assert_eq!(res[0], Neighbor { id: 5, dist: 0.0 });
    }

    #[test]
    fn k_equals_n_is_a_sorted_permutation() {
        let ds = generate_synthetic(40, 4, 2, 5).unwrap();
        let res = exact_topk(&ds, &[0.0; 4], 40).unwrap();
        let mut ids: Vec<u32> = res.iter().map(|r| r.id).collect();
        assert!(res.windows(2).all(|w| w[0].dist <= w[1].dist));
        ids.sort_unstable();
        assert_eq!(ids, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn ties_break_by_lower_id() {
        let ds = VectorDataset::new(1, vec![1.0, -1.0, 1.0, 2.0]).unwrap();
        let res = exact_topk(&ds, &[0.0], 3).unwrap();
        let ids: Vec<u32> = res.iter().map(|r| r.id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn dimension_mismatch_and_bad_k() {
        let ds = generate_synthetic(10, 4, 2, 5).unwrap();
        assert!(matches!(exact_topk(&ds, &[0.0; 3], 1), Err(Error::Argument(_))));
        assert!(exact_topk(&ds, &[0.0; 4], 11).is_err());
        assert!(exact_topk(&ds, &[0.0; 4], 0).is_err());
    }
}
