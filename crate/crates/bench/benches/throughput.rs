use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use tl_bench::{layers, shards, MLP};
use tl_core::baselines::{train_cl, BaselineConfig};
use tl_core::data::{Dataset, NodeShard};
use tl_core::nn::{batch_gradients, LossKind, MlpModel};
use tl_core::node::NodeState;
use tl_core::orchestrator::{train_tl, TlConfig};
use tl_core::simnet::{LatencyModel, SimTransport};
use tl_core::vbatch::{build_global_index, collect_index_ranges, plan_epoch, IndexRangeReport};

fn concat(shards: &[NodeShard]) -> Dataset {
    Dataset::concat(&shards.iter().map(|s| &s.dataset).collect::<Vec<_>>()).unwrap()
}

fn forward_backward(c: &mut Criterion) {
    let model = MlpModel::init(&layers(), 1).unwrap();
    let batch = concat(&shards(256)).subset(&(0..64).collect::<Vec<_>>());
    let (x, y) = (batch.features.clone(), batch.one_hot_labels());
    c.bench_function(&format!("batch_gradients {MLP} b64"), |b| {
        b.iter(|| batch_gradients(black_box(&model), &x, &y, LossKind::CrossEntropy).unwrap())
    });
}

fn epoch(c: &mut Criterion) {
    let shards = shards(1536);
    let cfg = TlConfig { epochs: 1, batch_size: 64, ..TlConfig::default() };
    c.bench_function("tl epoch 1536 samples 3 nodes", |b| {
        b.iter_batched(
            || {
                let nodes = shards.iter().cloned().map(NodeState::new).collect();
                SimTransport::new(nodes, LatencyModel::default()).unwrap()
            },
            |mut t| train_tl(&mut t, &layers(), &cfg).unwrap(),
            BatchSize::SmallInput,
        )
    });
    let data = concat(&shards);
    let base = BaselineConfig { epochs: 1, batch_size: 64, ..BaselineConfig::default() };
    c.bench_function("cl epoch 1536 samples", |b| b.iter(|| train_cl(&data, &layers(), &base).unwrap()));
}

fn planning(c: &mut Criterion) {
    let reports = collect_index_ranges((0..8).map(|i| IndexRangeReport { node_id: i, sample_count: 5000 })).unwrap();
    let map = build_global_index(&reports, true, 3);
    c.bench_function("plan_epoch 40000 samples 8 nodes b128", |b| {
        b.iter(|| plan_epoch(black_box(&map), 128, 3, 0).unwrap())
    });
}

criterion_group!(benches, forward_backward, epoch, planning);
criterion_main!(benches);
