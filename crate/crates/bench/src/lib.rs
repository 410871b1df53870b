//! Fixtures shared by the benchmarks.

use tl_core::data::{gen_synthetic, partition_by_sizes, NodeShard};
use tl_core::nn::{parse_layer_spec, LayerSpec};

pub const MLP: &str = "8,64:relu,32:relu,3:softmax";

pub fn layers() -> Vec<LayerSpec> {
    parse_layer_spec(MLP).expect("benchmark layer spec")
}

/// Three unequal shards of 3-class blobs with 8 features.
pub fn shards(samples: usize) -> Vec<NodeShard> {
    let data = gen_synthetic(samples, 8, 3, 1.0, 7).expect("synthetic data");
    let third = samples / 3;
    partition_by_sizes(&data, &[third + third / 2, third, samples - 2 * third - third / 2], 7).expect("partition")
}
