//! Datasets, loaders, synthetic generation, and node partitioning.

mod dataset;
mod kmeans;
mod loaders;
mod partition;
mod synthetic;

pub use dataset::{Dataset, NodeShard, Standardizer};
pub use kmeans::{kmeans, KMeansResult};
pub use loaders::{load_csv, load_idx, parse_csv, parse_idx};
pub use partition::{partition, partition_by_sizes, PartitionSpec, PartitionStrategy};
pub use synthetic::gen_synthetic;
