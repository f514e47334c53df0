use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::store::DescriptorStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: u64,
    pub distance: f64,
}

#[derive(Clone, Copy)]
struct Candidate {
    sq: f64,
    id: u64,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sq.total_cmp(&other.sq).then(self.id.cmp(&other.id))
    }
}

const BLOCK: usize = 16;

/// Squared distance, or `None` as soon as a partial sum exceeds `bound`.
#[inline]
fn bounded_sq_distance(a: &[f64], b: &[f64], bound: f64) -> Option<f64> {
    let mut sum = 0.0;
    for (ca, cb) in a.chunks(BLOCK).zip(b.chunks(BLOCK)) {
        for (x, y) in ca.iter().zip(cb) {
            let d = x - y;
            sum += d * d;
        }
        if sum > bound {
            return None;
        }
    }
    Some(sum)
}

/// The `k` entries nearest to `query` in ascending Euclidean distance, ties
/// going to the lower id. `exclude` is never returned.
pub fn knn(store: &DescriptorStore, query: &[f64], k: usize, exclude: Option<u64>) -> Result<Vec<Neighbor>> {
    if store.is_empty() {
        return Err(Error::Empty("knn over an empty store".into()));
    }
    if query.len() != store.dim() {
        return Err(Error::DimensionMismatch {
            expected: store.dim(),
            got: query.len(),
        });
    }
    let available = store.len() - usize::from(exclude.is_some_and(|id| store.get(id).is_some()));
    if k > available {
        return Err(Error::Insufficient(format!("{k} neighbours requested, {available} available")));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
    for e in store.entries() {
        if Some(e.id) == exclude {
            continue;
        }
        let bound = if heap.len() == k { heap.peek().unwrap().sq } else { f64::INFINITY };
        let Some(sq) = bounded_sq_distance(query, &e.descriptor, bound) else {
            continue;
        };
        let c = Candidate { sq, id: e.id };
        if heap.len() < k {
            heap.push(c);
        } else if c < *heap.peek().unwrap() {
            heap.pop();
            heap.push(c);
        }
    }
    Ok(heap
        .into_sorted_vec()
        .into_iter()
        .map(|c| Neighbor {
            id: c.id,
            distance: c.sq.sqrt(),
        })
        .collect())
}
