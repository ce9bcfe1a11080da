//! The differentiable neural dictionary: an append-only key/value memory
//! queried by kernel-weighted nearest-neighbour regression.
//!
//! A lookup finds the top `p` neighbours of a query key, turns their
//! inverse-distance kernels into normalised weights and returns the
//! weighted sum of stored values. The whole read is differentiable, so a
//! backward pass yields gradients for the query key, the neighbour keys
//! and the neighbour values. Writes either append, update an existing
//! entry with a fast tabular step when the key is already present, or
//! overwrite the least-recently-neighboured entry once the memory is at
//! capacity.

use crate::index::{KdIndex, KeyId, QueryMode};
use crate::linalg::squared_distance;
use crate::{Error, Result};

/// Hyperparameters of one dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct DndConfig {
    /// Maximum number of entries before LRU-neighbour eviction.
    pub capacity: usize,
    /// Number of neighbours per lookup.
    pub p: usize,
    /// Kernel stabilizer: `k(h, h_i) = 1 / (||h - h_i||^2 + delta)`.
    pub delta: f64,
    /// Fast learning rate of the tabular value update.
    pub alpha: f64,
    /// Squared-distance threshold under which a written key counts as an
    /// exact match of a stored key.
    pub exact_match_eps: f64,
}

impl Default for DndConfig {
    fn default() -> Self {
        DndConfig {
            capacity: 50_000,
            p: 50,
            delta: 1e-3,
            alpha: 0.1,
            exact_match_eps: 1e-10,
        }
    }
}

impl DndConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::Config("dnd.p must be >= 1".into()));
        }
        if self.capacity < self.p {
            return Err(Error::Config(format!(
                "dnd.capacity {} must be >= dnd.p {}",
                self.capacity, self.p
            )));
        }
        if !(self.delta > 0.0) {
            return Err(Error::Config("dnd.delta must be > 0".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config("dnd.alpha must be in (0, 1]".into()));
        }
        if self.exact_match_eps < 0.0 {
            return Err(Error::Config("dnd.exact_match_eps must be >= 0".into()));
        }
        Ok(())
    }
}

/// Inverse-distance kernel with heavy tails: far neighbours decay
/// polynomially instead of exponentially, so weight never collapses onto
/// a single point.
pub fn kernel(h: &[f64], h_i: &[f64], delta: f64) -> f64 {
    1.0 / (squared_distance(h, h_i) + delta)
}

/// Everything one lookup computed, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LookupTrace {
    pub query: Vec<f64>,
    pub ids: Vec<KeyId>,
    pub squared_distances: Vec<f64>,
    pub kernels: Vec<f64>,
    pub weights: Vec<f64>,
    pub output: f64,
}

/// Outcome of a write.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteOutcome {
    /// A new entry was appended at this slot.
    Appended(KeyId),
    /// An existing entry matched the key; its value moved toward the
    /// target by the fast learning rate.
    Updated(KeyId),
    /// The memory was full; this slot's previous occupant was evicted.
    EvictedAndAppended(KeyId),
}

/// Gradients for one memory from a batched backward pass.
#[derive(Debug, Clone, Default)]
pub struct MemoryGrads {
    pub ids: Vec<KeyId>,
    pub key_grads: Vec<Vec<f64>>,
    pub value_grads: Vec<f64>,
}

/// One per-action episodic memory.
#[derive(Debug, Clone)]
pub struct DndMemory {
    config: DndConfig,
    keys: Vec<Vec<f64>>,
    values: Vec<f64>,
    last_neighbour_time: Vec<u64>,
    index: KdIndex,
    clock: u64,
}

impl DndMemory {
    pub fn new(config: DndConfig) -> Result<Self> {
        config.validate()?;
        Ok(DndMemory {
            config,
            keys: Vec::new(),
            values: Vec::new(),
            last_neighbour_time: Vec::new(),
            index: KdIndex::new(),
            clock: 0,
        })
    }

    pub fn config(&self) -> &DndConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn keys(&self) -> &[Vec<f64>] {
        &self.keys
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn timestamps(&self) -> &[u64] {
        &self.last_neighbour_time
    }

    /// Kernel-weighted read. Returns the trace and advances the lookup
    /// clock; every returned neighbour's eviction timestamp is set to
    /// the current clock.
    pub fn lookup(&mut self, h: &[f64], mode: QueryMode) -> Result<LookupTrace> {
        let trace = self.lookup_readonly(h, mode)?;
        for id in &trace.ids {
            self.last_neighbour_time[*id] = self.clock;
        }
        self.clock += 1;
        Ok(trace)
    }

    /// The same read without side effects, for evaluation rollouts that
    /// must leave the agent byte-identical.
    pub fn lookup_readonly(&self, h: &[f64], mode: QueryMode) -> Result<LookupTrace> {
        if self.is_empty() {
            return Err(Error::EmptyMemory);
        }
        let p = self.config.p.min(self.len());
        let neighbours = self.index.query_knn(h, p, mode)?;
        debug_assert!(!neighbours.is_empty());
        let ids: Vec<KeyId> = neighbours.iter().map(|(id, _)| *id).collect();
        let squared_distances: Vec<f64> = neighbours.iter().map(|(_, d)| *d).collect();
        let kernels: Vec<f64> = squared_distances
            .iter()
            .map(|d| 1.0 / (d + self.config.delta))
            .collect();
        let kernel_sum: f64 = kernels.iter().sum();
        let weights: Vec<f64> = kernels.iter().map(|k| k / kernel_sum).collect();
        let output = weights
            .iter()
            .zip(&ids)
            .map(|(w, id)| w * self.values[*id])
            .sum();
        Ok(LookupTrace {
            query: h.to_vec(),
            ids,
            squared_distances,
            kernels,
            weights,
            output,
        })
    }

    /// Gradients of a scalar loss through `o = sum_i w_i v_i` with
    /// `w_i = k_i / sum_j k_j` and `k_i = 1 / (||h - h_i||^2 + delta)`.
    ///
    /// Returns `(dL/dh, dL/dkey_i per neighbour, dL/dvalue_i per
    /// neighbour)`. The trace must describe the current memory state; a
    /// trace whose neighbour keys have moved is rejected.
    pub fn lookup_backward(
        &self,
        trace: &LookupTrace,
        dl_do: f64,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>, Vec<f64>)> {
        let kernel_sum: f64 = trace.kernels.iter().sum();
        let dim = trace.query.len();
        let mut dl_dh = vec![0.0; dim];
        let mut dl_dkeys = Vec::with_capacity(trace.ids.len());
        let mut dl_dvalues = Vec::with_capacity(trace.ids.len());
        for (i, &id) in trace.ids.iter().enumerate() {
            let key = self
                .keys
                .get(id)
                .ok_or_else(|| Error::Internal(format!("trace refers to unknown id {id}")))?;
            let d_now = squared_distance(&trace.query, key);
            if d_now != trace.squared_distances[i] {
                return Err(Error::Internal(
                    "stale lookup trace: neighbour keys moved since lookup".into(),
                ));
            }
            let value = self.values[id];
            // dL/dv_i = dL/do * w_i
            dl_dvalues.push(dl_do * trace.weights[i]);
            // do/dk_i = (v_i - o) / sum_j k_j, dk_i/dd_i = -k_i^2
            let dl_dk = dl_do * (value - trace.output) / kernel_sum;
            let dl_dd = dl_dk * (-(trace.kernels[i] * trace.kernels[i]));
            // d_i = ||h - h_i||^2: dd/dh = 2 (h - h_i), dd/dh_i = -dd/dh
            let mut dl_dkey = vec![0.0; dim];
            for j in 0..dim {
                let diff = 2.0 * (trace.query[j] - key[j]);
                dl_dh[j] += dl_dd * diff;
                dl_dkey[j] = -dl_dd * diff;
            }
            dl_dkeys.push(dl_dkey);
        }
        Ok((dl_dh, dl_dkeys, dl_dvalues))
    }

    /// Write a key/target pair.
    ///
    /// An existing key within `exact_match_eps` (squared distance) is
    /// updated in place with the fast tabular rule
    /// `V <- (1 - alpha) V + alpha target`; otherwise the pair is
    /// appended, evicting the least-recently-neighboured entry when the
    /// memory is at capacity.
    pub fn write(&mut self, h: &[f64], q_target: f64) -> Result<WriteOutcome> {
        if !h.iter().all(|v| v.is_finite()) || !q_target.is_finite() {
            return Err(Error::InvalidInput("non-finite write to memory".into()));
        }
        if !self.is_empty() {
            let nearest = self.index.query_knn(h, 1, QueryMode::Exact)?;
            if let Some(&(id, d)) = nearest.first() {
                if d <= self.config.exact_match_eps {
                    let alpha = self.config.alpha;
                    // (1-a)*V + a*T rather than V + a*(T-V): alpha = 1 is
                    // then an exact overwrite and the error contraction
                    // is float-exact against a shadow recurrence.
                    self.values[id] = (1.0 - alpha) * self.values[id] + alpha * q_target;
                    self.last_neighbour_time[id] = self.clock;
                    return Ok(WriteOutcome::Updated(id));
                }
            }
        }
        if self.len() < self.config.capacity {
            let id = self.keys.len();
            self.keys.push(h.to_vec());
            self.values.push(q_target);
            self.last_neighbour_time.push(self.clock);
            self.index.insert(id, h.to_vec())?;
            Ok(WriteOutcome::Appended(id))
        } else {
            //

            // Evict the entry least recently seen in a neighbour set;
            // ties fall to the lowest slot.
            let victim = self
                .last_neighbour_time
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.cmp(b.1).then(a.0.cmp(&b.0)))
                .map(|(id, _)| id)
                .expect("memory at capacity is non-empty");
            self.keys[victim] = h.to_vec();
            self.values[victim] = q_target;
            self.last_neighbour_time[victim] = self.clock;
            self.index.update_key(victim, h.to_vec())?;
            Ok(WriteOutcome::EvictedAndAppended(victim))
        }
    }

    /// Plain SGD step on stored keys and values at the slow rate. The
    /// index is told about every key that actually moved; once at least
    /// 10% of keys have moved since the last rebuild, the tree is
    /// rebuilt.
    pub fn apply_memory_gradients(&mut self, grads: &MemoryGrads, slow_lr: f64) -> Result<()> {
        if grads.ids.len() != grads.key_grads.len() || grads.ids.len() != grads.value_grads.len() {
            return Err(Error::Internal("ragged memory gradients".into()));
        }
        for ((&id, key_grad), &value_grad) in grads
            .ids
            .iter()
            .zip(&grads.key_grads)
            .zip(&grads.value_grads)
        {
            let key = self
                .keys
                .get_mut(id)
                .ok_or_else(|| Error::Internal(format!("unknown id {id} in gradient step")))?;
            if key_grad.len() != key.len() {
                return Err(Error::Internal("key gradient dimension mismatch".into()));
            }
            let moved = key_grad.iter().any(|g| *g != 0.0);
            if moved {
                for (k, g) in key.iter_mut().zip(key_grad) {
                    *k -= slow_lr * g;
                }
                let updated = key.clone();
                self.index.update_key(id, updated)?;
            }
            self.values[id] -= slow_lr * value_grad;
        }
        if self.index.stale_fraction() >= 0.1 {
            self.index.rebuild();
        }
        Ok(())
    }

    /// Restore from checkpoint arrays; the index is rebuilt from the
    /// keys rather than persisted.
    pub fn from_snapshot(
        config: DndConfig,
        keys: Vec<Vec<f64>>,
        values: Vec<f64>,
        last_neighbour_time: Vec<u64>,
        clock: u64,
    ) -> Result<Self> {
        config.validate()?;
        if keys.len() != values.len() || keys.len() != last_neighbour_time.len() {
            return Err(Error::Parse("ragged memory snapshot".into()));
        }
        if keys.len() > config.capacity {
            return Err(Error::Parse("memory snapshot exceeds capacity".into()));
        }
        let index = KdIndex::build(keys.iter().cloned().enumerate().collect())?;
        Ok(DndMemory {
            config,
            keys,
            values,
            last_neighbour_time,
            index,
            clock,
        })
    }
}
