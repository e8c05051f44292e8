use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// A (distance, tie-key, id) triple ordered by distance, then tie-key.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Entry {
    pub dist: f32,
    pub tie: u64,
    pub id: u32,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.tie.cmp(&other.tie))
    }
}

/// Keeps the `cap` smallest entries seen so far.
///
/// An entry equal to the current worst on both distance and tie-key is
/// rejected, so with a sequence number as tie-key the first-encountered
/// entry wins.
pub(crate) struct BoundedMaxHeap {
    cap: usize,
    heap: BinaryHeap<Entry>,
}

impl BoundedMaxHeap {
    pub fn new(cap: usize) -> Self {
        Self {
            cap,
            heap: BinaryHeap::with_capacity(cap + 1),
        }
    }

    #[inline]
    pub fn push(&mut self, dist: f32, tie: u64, id: u32) {
        let e = Entry { dist, tie, id };
        if self.heap.len() < self.cap {
            self.heap.push(e);
        } else if let Some(mut top) = self.heap.peek_mut() {
            if e < *top {
                *top = e;
            }
        }
    }

    pub fn into_sorted(self) -> Vec<Entry> {
        self.heap.into_sorted_vec()
    }
}
