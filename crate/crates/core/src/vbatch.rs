//! Virtual batch creation: index-range collection, global re-indexing, seeded
//! shuffling, and the per-batch traversal plan.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A node's sample count; local indices are implicitly `0..sample_count`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexRangeReport {
    pub node_id: u32,
    pub sample_count: usize,
}

/// Validates the reports and orders them by node id.
pub fn collect_index_ranges(reports: impl IntoIterator<Item = IndexRangeReport>) -> Result<Vec<IndexRangeReport>> {
    let mut reports: Vec<IndexRangeReport> = reports.into_iter().collect();
    if reports.is_empty() {
        return Err(Error::Config("at least one node is required".into()));
    }
    if let Some(r) = reports.iter().find(|r| r.sample_count == 0) {
        return Err(Error::Config(format!("node {} reported zero samples", r.node_id)));
    }
    reports.sort_by_key(|r| r.node_id);
    if let Some(w) = reports.windows(2).find(|w| w[0].node_id == w[1].node_id) {
        return Err(Error::Config(format!("node {} reported twice", w[0].node_id)));
    }
    Ok(reports)
}

/// Bijection between global ids `0..total` and `(node_id, local_index)` pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalIndexMap {
    total: usize,
    forward: Vec<(u32, usize)>,
    reverse: HashMap<u32, Vec<usize>>,
}

impl GlobalIndexMap {
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn resolve(&self, global_id: usize) -> Option<(u32, usize)> {
        self.forward.get(global_id).copied()
    }

    pub fn global_id(&self, node_id: u32, local_index: usize) -> Option<usize> {
        self.reverse.get(&node_id)?.get(local_index).copied()
    }

    /// Node ids in ascending order.
    pub fn node_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.reverse.keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    pub fn node_sample_count(&self, node_id: u32) -> Option<usize> {
        self.reverse.get(&node_id).map(Vec::len)
    }
}

/// Sequential ids by (node order, local index); with `randomize_ids` the sequential
/// assignment is composed with a seeded permutation.
pub fn build_global_index(reports: &[IndexRangeReport], randomize_ids: bool, seed: u64) -> GlobalIndexMap {
    let total: usize = reports.iter().map(|r| r.sample_count).sum();
    let mut ids: Vec<usize> = (0..total).collect();
    if randomize_ids {
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut forward = vec![(0u32, 0usize); total];
    let mut reverse = HashMap::new();
    let mut seq = 0;
    for r in reports {
        let mut locals = Vec::with_capacity(r.sample_count);
        for local in 0..r.sample_count {
            let g = ids[seq];
            forward[g] = (r.node_id, local);
            locals.push(g);
            seq += 1;
        }
        reverse.insert(r.node_id, locals);
    }
    GlobalIndexMap {
        total,
        forward,
        reverse,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualBatch {
    pub batch_id: u32,
    pub global_ids: Vec<usize>,
}

impl VirtualBatch {
    pub fn len(&self) -> usize {
        self.global_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.global_ids.is_empty()
    }
}

/// Seeded permutation of `0..total` cut into consecutive batches; the last short
/// batch is kept.
pub fn shuffle_ids_into_batches(total: usize, batch_size: usize, seed: u64) -> Result<Vec<VirtualBatch>> {
    if batch_size == 0 {
        return Err(Error::Validation("batch_size must be >= 1".into()));
    }
    let mut ids: Vec<usize> = (0..total).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(ids
        .chunks(batch_size)
        .enumerate()
        .map(|(i, c)| VirtualBatch {
            batch_id: i as u32,
            global_ids: c.to_vec(),
        })
        .collect())
}

pub fn shuffle_into_batches(map: &GlobalIndexMap, batch_size: usize, seed: u64) -> Result<Vec<VirtualBatch>> {
    shuffle_ids_into_batches(map.total(), batch_size, seed)
}

/// Seed for an epoch's shuffle.
pub fn epoch_seed(base_seed: u64, epoch: usize) -> u64 {
    base_seed.wrapping_add(epoch as u64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraversalStep {
    pub node_id: u32,
    pub local_indices: Vec<usize>,
    /// Row of each sample in the reassembled batch matrix.
    pub positions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_id: u32,
    pub batch_size: usize,
    pub steps: Vec<TraversalStep>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraversalPlan {
    pub batches: Vec<BatchPlan>,
}

/// Groups each batch by owning node. Nodes are visited in order of their first
/// occurrence in the batch; local indices follow batch order.
pub fn generate_traversal_plan(batches: &[VirtualBatch], map: &GlobalIndexMap) -> Result<TraversalPlan> {
    let mut plans = Vec::with_capacity(batches.len());
    for batch in batches {
        let mut steps: Vec<TraversalStep> = Vec::new();
        let mut slot: HashMap<u32, usize> = HashMap::new();
        for (pos, &g) in batch.global_ids.iter().enumerate() {
            let (node, local) = map.resolve(g).ok_or_else(|| {
                Error::Integrity(format!(
                    "batch {} holds global id {g}, map covers 0..{}",
                    batch.batch_id,
                    map.total()
                ))
            })?;
            let s = *slot.entry(node).or_insert_with(|| {
                steps.push(TraversalStep {
                    node_id: node,
                    local_indices: Vec::new(),
                    positions: Vec::new(),
                });
                steps.len() - 1
            });
            steps[s].local_indices.push(local);
            steps[s].positions.push(pos);
        }
        plans.push(BatchPlan {
            batch_id: batch.batch_id,
            batch_size: batch.len(),
            steps,
        });
    }
    Ok(TraversalPlan { batches: plans })
}

/// One epoch of batches and their plan.
pub fn plan_epoch(
    map: &GlobalIndexMap,
    batch_size: usize,
    base_seed: u64,
    epoch: usize,
) -> Result<(Vec<VirtualBatch>, TraversalPlan)> {
    let batches = shuffle_into_batches(map, batch_size, epoch_seed(base_seed, epoch))?;
    let plan = generate_traversal_plan(&batches, map)?;
    Ok((batches, plan))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStats {
    pub batches: usize,
    pub steps: usize,
    pub mean_nodes_per_batch: f64,
    pub max_nodes_per_batch: usize,
}

impl TraversalPlan {
    pub fn stats(&self) -> PlanStats {
        let steps: usize = self.batches.iter().map(|b| b.steps.len()).sum();
        PlanStats {
            batches: self.batches.len(),
            steps,
            mean_nodes_per_batch: if self.batches.is_empty() {
                0.0
            } else {
                steps as f64 / self.batches.len() as f64
            },
            max_nodes_per_batch: self.batches.iter().map(|b| b.steps.len()).max().unwrap_or(0),
        }
    }
}
