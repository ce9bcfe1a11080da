//! kd-tree p-nearest-neighbour index with incremental inserts and
//! staleness tracking.
//!
//! Vectors live in one id-keyed arena; the tree holds only ids, so
//! distances are always computed from the current vectors. Three pools
//! feed a query: the tree (ids whose vectors are unchanged since the
//! last rebuild), a pending-insert buffer, and a stale set of ids whose
//! vectors moved since the last rebuild. Buffer and stale set are
//! scanned linearly, which keeps exact mode exact even between rebuilds.
//!
//! Exact mode backtracks fully; approximate mode caps the number of tree
//! nodes visited and may miss neighbours, but every distance it reports
//! is computed from the stored vectors.

use crate::{Error, Result};
use std::collections::{BTreeMap, BTreeSet};

/// Identifier of a stored key. Within a DND this is the slot in the
/// memory's arrays; ids are stable across rebuilds.
pub type KeyId = usize;

/// Neighbour search mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryMode {
    /// Full backtracking; returns the true p nearest.
    Exact,
    /// Bounded backtracking; returns a subset with correct distances.
    Approximate,
}

const LEAF_SIZE: usize = 8;
pub const DEFAULT_REBUILD_THRESHOLD: usize = 1024;
pub const DEFAULT_VISIT_BUDGET_FACTOR: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        ids: Vec<KeyId>,
    },
}

/// kd-tree index over key vectors.
#[derive(Debug, Clone)]
pub struct KdIndex {
    dim: Option<usize>,
    vectors: BTreeMap<KeyId, Vec<f64>>,
    nodes: Vec<Node>,
    root: Option<usize>,
    buffer: Vec<KeyId>,
    stale: BTreeSet<KeyId>,
    dirty: bool,
    depth: usize,
    pub rebuild_threshold: usize,
    /// Approximate mode visits at most `visit_budget_factor * depth`
    /// tree nodes.
    pub visit_budget_factor: usize,
}

impl Default for KdIndex {
    fn default() -> Self {
        KdIndex::new()
    }
}

impl KdIndex {
    /// Empty index; dimension is fixed by the first key.
    pub fn new() -> Self {
        KdIndex {
            dim: None,
            vectors: BTreeMap::new(),
            nodes: Vec::new(),
            root: None,
            buffer: Vec::new(),
            stale: BTreeSet::new(),
            dirty: false,
            depth: 0,
            rebuild_threshold: DEFAULT_REBUILD_THRESHOLD,
            visit_budget_factor: DEFAULT_VISIT_BUDGET_FACTOR,
        }
    }

    /// Build a balanced tree over the given keys.
    pub fn build(keys: Vec<(KeyId, Vec<f64>)>) -> Result<Self> {
        let mut index = KdIndex::new();
        for (id, v) in keys {
            index.check_dim(&v)?;
            if index.vectors.insert(id, v).is_some() {
                return Err(Error::Internal(format!("duplicate key id {id}")));
            }
        }
        index.rebuild();
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn contains(&self, id: KeyId) -> bool {
        self.vectors.contains_key(&id)
    }

    /// True after any `update_key` since the last rebuild.
    pub fn is_dirty(&self) -> bool {
        self.dirty
    }

    /// Fraction of stored keys whose vectors moved since the last
    /// rebuild. Drives the caller's rebuild policy.
    pub fn stale_fraction(&self) -> f64 {
        if self.vectors.is_empty() {
            0.0
        } else {
            self.stale.len() as f64 / self.vectors.len() as f64
        }
    }

    pub fn pending(&self) -> usize {
        self.buffer.len()
    }

    fn check_dim(&mut self, v: &[f64]) -> Result<()> {
        match self.dim {
            None => {
                if v.is_empty() {
                    return Err(Error::InvalidInput("zero-dimensional key".into()));
                }
                self.dim = Some(v.len());
                Ok(())
            }
            Some(d) if d == v.len() => Ok(()),
            Some(d) => Err(Error::InvalidInput(format!(
                "key dimension {} does not match index dimension {d}",
                v.len()
            ))),
        }
    }

    /// Insert a new key. It is immediately visible to queries via the
    /// pending buffer; once the buffer reaches `rebuild_threshold` the
    /// tree is rebuilt.
    pub fn insert(&mut self, id: KeyId, vector: Vec<f64>) -> Result<()> {
        self.check_dim(&vector)?;
        if self.vectors.contains_key(&id) {
            return Err(Error::Internal(format!("duplicate key id {id}")));
        }
        self.vectors.insert(id, vector);
        self.buffer.push(id);
        if self.buffer.len() >= self.rebuild_threshold {
            self.rebuild();
        }
        Ok(())
    }

    /// Replace the vector of an existing key. Marks the index dirty;
    /// queries keep returning correct distances (vectors are read from
    /// the arena) and the moved key stays reachable via the stale scan.
    pub fn update_key(&mut self, id: KeyId, vector: Vec<f64>) -> Result<()> {
        self.check_dim(&vector)?;
        match self.vectors.get_mut(&id) {
            None => Err(Error::Internal(format!("unknown key id {id}"))),
            Some(slot) => {
                *slot = vector;
                self.dirty = true;
                // Buffer-resident ids are linearly scanned already; only
                // tree-resident ids need the stale scan.
                if !self.buffer.contains(&id) {
                    self.stale.insert(id);
                }
                Ok(())
            }
        }
    }

    /// Rebuild the tree over all current vectors; clears the buffer,
    /// stale set and dirty flag.
    pub fn rebuild(&mut self) {
        self.nodes.clear();
        self.buffer.clear();
        self.stale.clear();
        self.dirty = false;
        self.depth = 0;
        if self.vectors.is_empty() {
            self.root = None;
            return;
        }
        let ids: Vec<KeyId> = self.vectors.keys().copied().collect();
        let root = self.build_node(ids, 1);
        self.root = Some(root);
    }

    fn build_node(&mut self, mut ids: Vec<KeyId>, level: usize) -> usize {
        self.depth = self.depth.max(level);
        if ids.len() <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { ids });
            return self.nodes.len() - 1;
        }
        // Median split on the dimension with the widest spread.
        let dim = self.dim.expect("non-empty tree has a dimension");
        let mut best_dim = 0;
        let mut best_spread = -1.0;
        for d in 0..dim {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for id in &ids {
                let x = self.vectors[id][d];
                lo = lo.min(x);
                hi = hi.max(x);
            }
            let spread = hi - lo;
            if spread > best_spread {
                best_spread = spread;
                best_dim = d;
            }
        }
        if best_spread == 0.0 {
            // All points identical; a leaf avoids infinite recursion.
            self.nodes.push(Node::Leaf { ids });
            return self.nodes.len() - 1;
        }
        ids.sort_by(|a, b| {
            let xa = self.vectors[a][best_dim];
            let xb = self.vectors[b][best_dim];
            xa.total_cmp(&xb).then(a.cmp(b))
        });
        let mut mid = ids.len() / 2;
        // Keep equal coordinates on the left so the tree invariant
        // (left <= split < right candidates) stays meaningful.
        let split_value = self.vectors[&ids[mid]][best_dim];
        while mid < ids.len() && self.vectors[&ids[mid]][best_dim] == split_value {
            mid += 1;
        }
        if mid == ids.len() {
            // Everything <= split_value ended up left; fall back to the
            // first index with the split value to keep both sides
            // non-empty.
            mid = ids
                .iter()
                .position(|id| self.vectors[id][best_dim] == split_value)
                .unwrap_or(ids.len() / 2)
                .max(1);
        }
        let right_ids = ids.split_off(mid);
        let left_ids = ids;
        let split_value = self.vectors[left_ids.last().unwrap()][best_dim];
        let left = self.build_node(left_ids, level + 1);
        let right = self.build_node(right_ids, level + 1);
        self.nodes.push(Node::Split {
            dim: best_dim,
            value: split_value,
            left,
            right,
        });
        self.nodes.len() - 1
    }

    /// p-nearest-neighbour query. Results are ordered by ascending
    /// squared L2 distance, ties broken by lower id. Returns at most `p`
    /// results (fewer when the index holds fewer keys).
    pub fn query_knn(
        &self,
        query: &[f64],
        p: usize,
        mode: QueryMode,
    ) -> Result<Vec<(KeyId, f64)>> {
        if p == 0 {
            return Err(Error::InvalidInput("neighbour count p must be >= 1".into()));
        }
        if self.vectors.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(d) = self.dim {
            if query.len() != d {
                return Err(Error::InvalidInput(format!(
                    "query dimension {} does not match index dimension {d}",
                    query.len()
                )));
            }
        }
        let mut heap = BoundedHeap::new(p);
        if let Some(root) = self.root {
            let budget = match mode {
                QueryMode::Exact => usize::MAX,
                QueryMode::Approximate => self.visit_budget_factor * self.depth.max(1),
            };
            let mut visits = 0usize;
            self.search(root, query, &mut heap, budget, &mut visits);
        }
        // Moved and freshly inserted keys are scanned linearly so exact
        // mode never misses them.
        for id in &self.stale {
            heap.offer(*id, crate::linalg::squared_distance(query, &self.vectors[id]));
        }
        for id in &self.buffer {
            heap.offer(*id, crate::linalg::squared_distance(query, &self.vectors[id]));
        }
        Ok(heap.into_sorted())
    }

    fn search(
        &self,
        node: usize,
        query: &[f64],
        heap: &mut BoundedHeap,
        budget: usize,
        visits: &mut usize,
    ) {
        if *visits >= budget {
            return;
        }
        *visits += 1;
        match &self.nodes[node] {
            Node::Leaf { ids } => {
                for id in ids {
                    // Moved ids are covered by the stale scan.
                    if self.stale.contains(id) {
                        continue;
                    }
                    heap.offer(*id, crate::linalg::squared_distance(query, &self.vectors[id]));
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = query[*dim] - *value;
                let (near, far) = if diff <= 0.0 {
                    (*left, *right)
                } else {
                    (*right, *left)
                };
                self.search(near, query, heap, budget, visits);
                // <= not <: a far-side point at exactly the worst kept
                // distance may still win its tie on a lower id.
                if !heap.is_full() || diff * diff <= heap.worst() {
                    self.search(far, query, heap, budget, visits);
                }
            }
        }
    }
}

/// Max-heap over (distance, id) keeping the p smallest candidates; the
/// lexicographic order makes ties resolve toward lower ids.
struct BoundedHeap {
    cap: usize,
    heap: std::collections::BinaryHeap<Candidate>,
}

#[derive(PartialEq)]
struct Candidate {
    dist: f64,
    id: KeyId,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl BoundedHeap {
    fn new(cap: usize) -> Self {
        BoundedHeap {
            cap,
            heap: std::collections::BinaryHeap::with_capacity(cap + 1),
        }
    }

    fn is_full(&self) -> bool {
        self.heap.len() >= self.cap
    }

    /// Squared distance of the current worst kept candidate.
    fn worst(&self) -> f64 {
        self.heap.peek().map(|c| c.dist).unwrap_or(f64::INFINITY)
    }

    fn offer(&mut self, id: KeyId, dist: f64) {
        let cand = Candidate { dist, id };
        if self.heap.len() < self.cap {
            self.heap.push(cand);
        } else if let Some(top) = self.heap.peek() {
            if cand < *top {
                self.heap.pop();
                self.heap.push(cand);
            }
        }
    }

    fn into_sorted(self) -> Vec<(KeyId, f64)> {
        self.heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| (c.id, c.dist))
            .collect()
    }
}
