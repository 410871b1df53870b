//! Splitting a dataset across nodes: IID, label skew (sort-and-deal shards), and
//! k-means clusters.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kmeans::kmeans;
use super::{Dataset, NodeShard};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum PartitionStrategy {
    Iid,
    LabelSkew {
        shards_per_node: usize,
    },
    Kmeans {
        /// Defaults to the node count.
        #[serde(default)]
        k: Option<usize>,
        #[serde(default = "default_kmeans_iters")]
        max_iters: usize,
    },
}

fn default_kmeans_iters() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    #[serde(flatten)]
    pub strategy: PartitionStrategy,
    pub node_count: usize,
    #[serde(default)]
    pub seed: u64,
}

impl PartitionSpec {
    pub fn iid(node_count: usize, seed: u64) -> Self {
        Self {
            strategy: PartitionStrategy::Iid,
            node_count,
            seed,
        }
    }

    pub fn label_skew(node_count: usize, shards_per_node: usize, seed: u64) -> Self {
        Self {
            strategy: PartitionStrategy::LabelSkew { shards_per_node },
            node_count,
            seed,
        }
    }

    pub fn kmeans(node_count: usize, k: Option<usize>, seed: u64) -> Self {
        Self {
            strategy: PartitionStrategy::Kmeans {
                k,
                max_iters: default_kmeans_iters(),
            },
            node_count,
            seed,
        }
    }
}

/// Splits `dataset` into disjoint shards whose union is the dataset.
pub fn partition(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<NodeShard>> {
    let n = dataset.len();
    let nodes = spec.node_count;
    if nodes == 0 {
        return Err(Error::Validation("node_count must be >= 1".into()));
    }
    if n < nodes {
        return Err(Error::Validation(format!(
            "cannot give each of {nodes} nodes a sample from {n} samples"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); nodes];
    match &spec.strategy {
        PartitionStrategy::Iid => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            for (k, i) in idx.into_iter().enumerate() {
                buckets[k % nodes].push(i);
            }
        }
        PartitionStrategy::LabelSkew { shards_per_node } => {
            if *shards_per_node == 0 {
                return Err(Error::Validation("shards_per_node must be >= 1".into()));
            }
            let shard_count = nodes * shards_per_node;
            if shard_count > n {
                return Err(Error::Validation(format!(
                    "{shard_count} shards requested from {n} samples"
                )));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by_key(|&i| dataset.labels[i]);
            // Contiguous cuts, sizes balanced within one.
            let shards: Vec<&[usize]> = (0..shard_count)
                .map(|s| &idx[s * n / shard_count..(s + 1) * n / shard_count])
                .collect();
            let mut order: Vec<usize> = (0..shard_count).collect();
            order.shuffle(&mut rng);
            for (k, s) in order.into_iter().enumerate() {
                buckets[k / shards_per_node].extend_from_slice(shards[s]);
            }
        }
        PartitionStrategy::Kmeans { k, max_iters } => {
            let k = k.unwrap_or(nodes);
            let result = kmeans(&dataset.features, k, spec.seed, *max_iters)?;
            let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); k];
            for (i, &c) in result.assignments.iter().enumerate() {
                clusters[c].push(i);
            }
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by_key(|&c| (std::cmp::Reverse(clusters[c].len()), c));
            for (j, c) in order.into_iter().enumerate() {
                buckets[j % nodes].extend_from_slice(&clusters[c]);
            }
            for b in buckets.iter_mut() {
                b.sort_unstable();
            }
        }
    }
    rebalance(&mut buckets);
    Ok(buckets
        .into_iter()
        .enumerate()
        .map(|(node, idx)| NodeShard {
            node_id: node as u32,
            dataset: dataset.subset(&idx),
        })
        .collect())
}

/// Moves the last sample of the largest bucket (lowest id on ties) into each empty one.
fn rebalance(buckets: &mut [Vec<usize>]) {
    while let Some(empty) = buckets.iter().position(Vec::is_empty) {
        let donor = (0..buckets.len())
            .max_by_key(|&b| (buckets[b].len(), std::cmp::Reverse(b)))
            .expect("non-empty bucket list");
        let moved = buckets[donor].pop().expect("donor has at least two samples");
        buckets[empty].push(moved);
    }
}

/// Contiguous shards of the given sizes after a seeded shuffle.
pub fn partition_by_sizes(dataset: &Dataset, sizes: &[usize], seed: u64) -> Result<Vec<NodeShard>> {
    if sizes.iter().sum::<usize>() != dataset.len() {
        return Err(Error::Validation(format!(
            "shard sizes sum to {}, dataset has {} samples",
            sizes.iter().sum::<usize>(),
            dataset.len()
        )));
    }
    if sizes.contains(&0) {
        return Err(Error::Validation("every shard needs at least one sample".into()));
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut start = 0;
    Ok(sizes
        .iter()
        .enumerate()
        .map(|(node, &s)| {
            let shard = NodeShard {
                node_id: node as u32,
                dataset: dataset.subset(&idx[start..start + s]),
            };
            start += s;
            shard
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::Matrix;

    #[test]
    fn iid_even_split() {
        let d = gen_synthetic(10, 2, 2, 1.0, 0).unwrap();
        let shards = partition(&d, &PartitionSpec::iid(2, 5)).unwrap();
        assert_eq!(shards[0].dataset.len(), 5);
        assert_eq!(shards[1].dataset.len(), 5);
    }

    #[test]
    fn extreme_label_skew_is_single_class() {
        let d = gen_synthetic(20, 2, 2, 1.0, 0).unwrap();
        let shards = partition(&d, &PartitionSpec::label_skew(2, 1, 8)).unwrap();
        for s in &shards {
            let first = s.dataset.labels[0];
            assert!(s.dataset.labels.iter().all(|&l| l == first));
        }
        assert_ne!(shards[0].dataset.labels[0], shards[1].dataset.labels[0]);
    }

    #[test]
    fn kmeans_split_recovers_blobs() {
        let mut rows = Vec::new();
        for i in 0..6 {
            rows.push(vec![-50.0 + i as f64 * 0.1, 0.0]);
            rows.push(vec![50.0, i as f64 * 0.1]);
        }
        let labels = (0..12).map(|i| i % 2).collect();
        let d = Dataset::new(Matrix::from_rows(&rows).unwrap(), labels, 2).unwrap();
        let shards = partition(&d, &PartitionSpec::kmeans(2, None, 3)).unwrap();
        for s in &shards {
            assert_eq!(s.dataset.len(), 6);
            let side = s.dataset.features.get(0, 0) > 0.0;
            assert!((0..6).all(|r| (s.dataset.features.get(r, 0) > 0.0) == side));
        }
    }

    #[test]
    fn rebalance_fills_empty_nodes() {
        // One tight cluster dealt over three nodes leaves two nodes empty.
        let d = Dataset::new(Matrix::from_rows(&vec![vec![1.0]; 4]).unwrap(), vec![0; 4], 1).unwrap();
        let spec = PartitionSpec::kmeans(3, Some(1), 0);
        let shards = partition(&d, &spec).unwrap();
        assert!(shards.iter().all(|s| !s.dataset.is_empty()));
        assert_eq!(shards.iter().map(|s| s.dataset.len()).sum::<usize>(), 4);
        let tiny = Dataset::new(Matrix::zeros(2, 1), vec![0, 0], 1).unwrap();
        assert!(partition(&tiny, &PartitionSpec::iid(3, 0)).is_err());
    }

    #[test]
    fn sized_partition() {
        let d = gen_synthetic(10, 2, 2, 1.0, 0).unwrap();
        let shards = partition_by_sizes(&d, &[6, 3, 1], 1).unwrap();
        assert_eq!(shards.iter().map(|s| s.dataset.len()).collect::<Vec<_>>(), vec![6, 3, 1]);
        assert!(partition_by_sizes(&d, &[5, 4], 1).is_err());
    }
}
