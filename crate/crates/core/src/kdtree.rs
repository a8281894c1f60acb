//! A static kd-tree with exact and best-bin-first k-nearest-neighbour search.
//!
//! Used for 64-d descriptor matching (f32), statistical outlier removal on
//! 3-d clouds (f64) and 2-d nearest valid cell lookup. Ties are broken by the
//! smaller point id so that results agree exactly with exhaustive search.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::ops::{Add, Mul, Sub};

pub trait KdScalar:
    Copy + PartialOrd + Default + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Send + Sync
{
    fn to_f64(self) -> f64;
}

impl KdScalar for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl KdScalar for f64 {
    fn to_f64(self) -> f64 {
        self
    }
}

/// Squared Euclidean distance with a fixed eight-lane accumulation order.
///
/// Every matcher goes through this function so that distances are bitwise
/// identical across search strategies.
#[inline]
pub fn squared_distance<T: KdScalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::default(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (ca, cb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            let d = ca[l] - cb[l];
            acc[l] = acc[l] + d * d;
        }
    }
    for i in chunks * 8..a.len() {
        let d = a[i] - b[i];
        acc[i % 8] = acc[i % 8] + d * d;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

/// `(distance², id)` ordering: smaller distance first, then smaller id.
#[inline]
pub fn neighbor_cmp<T: KdScalar>(a: &(T, usize), b: &(T, usize)) -> Ordering {
    match a.0.partial_cmp(&b.0) {
        Some(Ordering::Equal) | None => a.1.cmp(&b.1),
        Some(o) => o,
    }
}

#[derive(Clone, Debug)]
enum Node<T> {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: T, left: usize, right: usize },
}

#[derive(Clone, Debug)]
pub struct KdTree<T> {
    dim: usize,
    /// Flattened coordinates, reordered so every leaf is contiguous.
    points: Vec<T>,
    ids: Vec<usize>,
    nodes: Vec<Node<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SearchLimit {
    Exact,
    /// Stop after visiting this many leaves.
    Checks(usize),
}

struct HeapEntry {
    bound: f64,
    node: usize,
    offsets: usize,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    // min-heap on bound
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .total_cmp(&self.bound)
            .then_with(|| other.node.cmp(&self.node))
    }
}

const NO_OFFSET: usize = usize::MAX;
const VARIANCE_SAMPLE: usize = 128;

impl<T: KdScalar> KdTree<T> {
    /// Builds a tree over `(id, coordinates)` pairs, all of length `dim`.
    pub fn build<'a, I>(dim: usize, items: I, leaf_size: usize) -> Self
    where
        I: IntoIterator<Item = (usize, &'a [T])>,
        T: 'a,
    {
        let mut raw = Vec::new();
        let mut raw_ids = Vec::new();
        for (id, p) in items {
            assert_eq!(p.len(), dim, "point dimension mismatch");
            raw.extend_from_slice(p);
            raw_ids.push(id);
        }
        let n = raw_ids.len();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut nodes = Vec::new();
        if n > 0 {
            build_node(&raw, dim, &mut perm, 0, n, leaf_size.max(1), &mut nodes);
        }
        let mut points = Vec::with_capacity(raw.len());
        let mut ids = Vec::with_capacity(n);
        for &i in &perm {
            points.extend_from_slice(&raw[i * dim..(i + 1) * dim]);
            ids.push(raw_ids[i]);
        }
        Self {
            dim,
            points,
            ids,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// k nearest neighbours of `query`, sorted by `(distance², id)`.
    pub fn knn(&self, query: &[T], k: usize, limit: SearchLimit) -> Vec<(T, usize)> {
        self.knn_filtered(query, k, limit, |_| true)
    }

    /// As [`KdTree::knn`] but only points whose id passes `accept` are
    /// considered.
    pub fn knn_filtered<F>(&self, query: &[T], k: usize, limit: SearchLimit, accept: F) -> Vec<(T, usize)>
    where
        F: Fn(usize) -> bool,
    {
        assert_eq!(query.len(), self.dim, "query dimension mismatch");
        let mut best: Vec<(T, usize)> = Vec::with_capacity(k + 1);
        if k == 0 || self.nodes.is_empty() {
            return best;
        }
        let max_leaves = match limit {
            SearchLimit::Exact => usize::MAX,
            SearchLimit::Checks(c) => c.max(1),
        };
        // (parent, dim, offset) chain; the squared offsets along a path sum to the bound.
        let mut arena: Vec<(usize, usize, f64)> = Vec::new();
        let mut heap = BinaryHeap::new();
        heap.push(HeapEntry {
            bound: 0.0,
            node: 0,
            offsets: NO_OFFSET,
        });
        let mut leaves = 0usize;

        while let Some(entry) = heap.pop() {
            if best.len() == k && prune(entry.bound, best[k - 1].0.to_f64()) {
                break;
            }
            let mut node = entry.node;
            let bound = entry.bound;
            let offsets = entry.offsets;
            loop {
                match &self.nodes[node] {
                    Node::Leaf { start, end } => {
                        for i in *start..*end {
                            let id = self.ids[i];
                            if !accept(id) {
                                continue;
                            }
                            let d = squared_distance(query, &self.points[i * self.dim..(i + 1) * self.dim]);
                            insert_sorted(&mut best, (d, id), k);
                        }
                        break;
                    }
                    Node::Split { dim, value, left, right } => {
                        let q = query[*dim];
                        let (near, far) = if q < *value { (*left, *right) } else { (*right, *left) };
                        let diff = (q - *value).to_f64();
                        let old = lookup_offset(&arena, offsets, *dim);
                        let far_bound = bound - old * old + diff * diff;
                        let worst = if best.len() == k { Some(best[k - 1].0.to_f64()) } else { None };
                        if worst.map_or(true, |w| !prune(far_bound, w)) {
                            arena.push((offsets, *dim, diff.abs()));
                            heap.push(HeapEntry {
                                bound: far_bound,
                                node: far,
                                offsets: arena.len() - 1,
                            });
                        }
                        node = near;
                    }
                }
            }
            leaves += 1;
            if leaves >= max_leaves {
                break;
            }
        }
        best
    }
}

/// Prunes only when the lower bound is clearly above the current worst, so
/// rounding in the accumulated distance can never drop a true neighbour.
#[inline]
fn prune(bound: f64, worst: f64) -> bool {
    bound > worst * (1.0 + 1e-5) + 1e-12
}

fn lookup_offset(arena: &[(usize, usize, f64)], mut at: usize, dim: usize) -> f64 {
    while at != NO_OFFSET {
        let (parent, d, off) = arena[at];
        if d == dim {
            return off;
        }
        at = parent;
    }
    0.0
}

fn insert_sorted<T: KdScalar>(best: &mut Vec<(T, usize)>, cand: (T, usize), k: usize) {
    if best.len() == k && neighbor_cmp(&cand, &best[k - 1]) != Ordering::Less {
        return;
    }
    let pos = best
        .iter()
        .position(|b| neighbor_cmp(&cand, b) == Ordering::Less)
        .unwrap_or(best.len());
    best.insert(pos, cand);
    best.truncate(k);
}

fn build_node<T: KdScalar>(
    raw: &[T],
    dim: usize,
    perm: &mut [usize],
    start: usize,
    end: usize,
    leaf_size: usize,
    nodes: &mut Vec<Node<T>>,
) -> usize {
    let idx = nodes.len();
    if end - start <= leaf_size {
        nodes.push(Node::Leaf { start, end });
        return idx;
    }
    // split dimension of largest variance, estimated on an evenly strided
    // subsample so construction stays O(n log n) in the descriptor length
    let step = ((end - start) / VARIANCE_SAMPLE).max(1);
    let count = perm[start..end].iter().step_by(step).count() as f64;
    let mut split_dim = 0;
    let mut best_var = -1.0;
    for d in 0..dim {
        let (mut s, mut s2) = (0.0, 0.0);
        for &i in perm[start..end].iter().step_by(step) {
            let v = raw[i * dim + d].to_f64();
            s += v;
            s2 += v * v;
        }
        let var = s2 / count - (s / count) * (s / count);
        if var > best_var {
            best_var = var;
            split_dim = d;
        }
    }
    if best_var <= 0.0 {
        nodes.push(Node::Leaf { start, end });
        return idx;
    }
    let mid = start + (end - start) / 2;
    perm[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
        raw[a * dim + split_dim]
            .partial_cmp(&raw[b * dim + split_dim])
            .unwrap_or(Ordering::Equal)
    });
    let value = raw[perm[mid] * dim + split_dim];
    nodes.push(Node::Leaf { start, end });
    let left = build_node(raw, dim, perm, start, mid, leaf_size, nodes);
    let right = build_node(raw, dim, perm, mid, end, leaf_size, nodes);
    nodes[idx] = Node::Split {
        dim: split_dim,
        value,
        left,
        right,
    };
    idx
}

/// Exhaustive k-NN, the reference the tree must agree with.
pub fn brute_force_knn<T: KdScalar>(
    points: &[(usize, &[T])],
    query: &[T],
    k: usize,
) -> Vec<(T, usize)> {
    let mut all: Vec<(T, usize)> = points
        .iter()
        .map(|(id, p)| (squared_distance(query, p), *id))
        .collect();
    all.sort_by(neighbor_cmp);
    all.truncate(k);
    all
}
