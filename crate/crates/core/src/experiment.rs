//! Experiment configuration, single runs, and seed-sweep comparisons.

use std::collections::BTreeMap;
use std::fmt;
use std::hash::Hasher;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{train_cl, train_fedavg, train_sfl, train_sl, train_sl_plus, BaselineConfig};
use crate::data::{gen_synthetic, load_csv, load_idx, partition, Dataset, NodeShard, PartitionSpec, PartitionStrategy, Standardizer};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::nn::{parse_layer_spec, LayerSpec, LossKind, MlpModel};
use crate::node::NodeState;
use crate::orchestrator::{train_tl, Aggregation, ConsistencyPolicy, ExecutionMode, TlConfig};
use crate::simnet::{LatencyModel, SimTransport};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cl,
    #[default]
    Tl,
    Fedavg,
    Sl,
    SlPlus,
    Sfl,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Cl, Method::Tl, Method::Fedavg, Method::Sl, Method::SlPlus, Method::Sfl];

    pub fn name(self) -> &'static str {
        match self {
            Method::Cl => "cl",
            Method::Tl => "tl",
            Method::Fedavg => "fedavg",
            Method::Sl => "sl",
            Method::SlPlus => "sl_plus",
            Method::Sfl => "sfl",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?} (expected cl, tl, fedavg, sl, sl_plus or sfl)")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Idx,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    pub samples: usize,
    pub features: usize,
    pub classes: usize,
    pub spread: f64,
    pub seed: u64,
    pub path: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub label_column: String,
    pub standardize: bool,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            samples: 512,
            features: 8,
            classes: 3,
            spread: 1.0,
            seed: 0,
            path: None,
            images: None,
            labels: None,
            label_column: "label".into(),
            standardize: true,
            train_fraction: 0.8,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub strategy: String,
    pub nodes: usize,
    pub seed: u64,
    pub shards_per_node: usize,
    pub k: Option<usize>,
    pub max_iters: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            strategy: "iid".into(),
            nodes: 3,
            seed: 0,
            shards_per_node: 2,
            k: None,
            max_iters: 100,
        }
    }
}

impl PartitionConfig {
    pub fn spec(&self) -> Result<PartitionSpec> {
        let strategy = match self.strategy.as_str() {
            "iid" => PartitionStrategy::Iid,
            "label_skew" => PartitionStrategy::LabelSkew {
                shards_per_node: self.shards_per_node,
            },
            "kmeans" => PartitionStrategy::Kmeans {
                k: self.k,
                max_iters: self.max_iters,
            },
            other => {
                return Err(Error::Config(format!(
                    "partition.strategy: unknown value {other:?} (expected iid, label_skew or kmeans)"
                )))
            }
        };
        Ok(PartitionSpec {
            strategy,
            node_count: self.nodes,
            seed: self.seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// e.g. `"8,16:relu,8:relu,3:softmax"`.
    pub layers: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: "8,16:relu,8:relu,3:softmax".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub method: Method,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: ExecutionMode,
    pub aggregation: Aggregation,
    pub loss: LossKind,
    pub split_layer: usize,
    pub local_epochs: usize,
    pub tolerance: f64,
    pub on_inconsistency: ConsistencyPolicy,
    pub randomize_ids: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            method: Method::Tl,
            learning_rate: 0.1,
            epochs: 5,
            batch_size: 32,
            seed: 0,
            mode: ExecutionMode::Deterministic,
            aggregation: Aggregation::PerSample,
            loss: LossKind::CrossEntropy,
            split_layer: 1,
            local_epochs: 1,
            tolerance: 1e-9,
            on_inconsistency: ConsistencyPolicy::Warn,
            randomize_ids: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub metrics: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.training;
        if !(t.learning_rate > 0.0) || !t.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "training.learning_rate must be positive and finite, got {}",
                t.learning_rate
            )));
        }
        if t.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be >= 1".into()));
        }
        if t.local_epochs == 0 {
            return Err(Error::Config("training.local_epochs must be >= 1".into()));
        }
        if !(t.tolerance >= 0.0) {
            return Err(Error::Config("training.tolerance must be >= 0".into()));
        }
        let d = &self.dataset;
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "dataset.train_fraction must lie in (0, 1), got {}",
                d.train_fraction
            )));
        }
        if self.partition.nodes == 0 {
            return Err(Error::Config("partition.nodes must be >= 1".into()));
        }
        let files: Vec<(&str, &Option<PathBuf>)> = match d.source {
            DataSource::Synthetic => Vec::new(),
            DataSource::Idx => vec![("dataset.images", &d.images), ("dataset.labels", &d.labels)],
            DataSource::Csv => vec![("dataset.path", &d.path)],
        };
        for (field, path) in files {
            match path {
                None => return Err(Error::Config(format!("{field} is required for this source"))),
                Some(p) if !p.exists() => {
                    return Err(Error::Config(format!("{field}: {} does not exist", p.display())))
                }
                Some(_) => {}
            }
        }
        self.partition.spec()?;
        parse_layer_spec(&self.model.layers).map_err(|e| Error::Config(format!("model.layers: {e}")))?;
        Ok(())
    }

    fn baseline_config(&self) -> BaselineConfig {
        let t = &self.training;
        BaselineConfig {
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: t.seed,
            split_layer: t.split_layer,
            local_epochs: t.local_epochs,
            loss_kind: t.loss,
            record_messages: false,
        }
    }

    fn tl_config(&self) -> TlConfig {
        let t = &self.training;
        TlConfig {
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: t.seed,
            aggregation: t.aggregation,
            mode: t.mode,
            tolerance: t.tolerance,
            on_inconsistency: t.on_inconsistency,
            loss_kind: t.loss,
            randomize_ids: t.randomize_ids,
            checkpoint_dir: self.output.checkpoint_dir.clone(),
            record_gradients: false,
        }
    }
}

/// Train/test data after splitting, standardization, and partitioning.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub shards: Vec<NodeShard>,
    pub layer_spec: Vec<LayerSpec>,
}

impl PreparedData {
    /// The shards concatenated in node order, which is the order of sequential
    /// global ids.
    pub fn centralized(&self) -> Result<Dataset> {
        Dataset::concat(&self.shards.iter().map(|s| &s.dataset).collect::<Vec<_>>())
    }
}

pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData> {
    config.validate()?;
    let d = &config.dataset;
    let full = match d.source {
        DataSource::Synthetic => gen_synthetic(d.samples, d.features, d.classes, d.spread, d.seed)?,
        DataSource::Idx => load_idx(d.images.as_ref().expect("validated"), d.labels.as_ref().expect("validated"))?,
        DataSource::Csv => load_csv(d.path.as_ref().expect("validated"), &d.label_column)?,
    };
    let (mut train, mut test) = full.train_test_split(d.train_fraction, d.split_seed)?;
    if d.standardize {
        let s = Standardizer::fit(&train.features);
        train.features = s.apply(&train.features);
        test.features = s.apply(&test.features);
    }
    let layer_spec = parse_layer_spec(&config.model.layers).map_err(|e| Error::Config(format!("model.layers: {e}")))?;
    let first = layer_spec[0].in_dim;
    let last = layer_spec[layer_spec.len() - 1].out_dim;
    if first != train.feature_count() {
        return Err(Error::Config(format!(
            "model.layers: input width {first} but the dataset has {} features",
            train.feature_count()
        )));
    }
    if last < train.class_count {
        return Err(Error::Config(format!(
            "model.layers: output width {last} but the dataset has {} classes",
            train.class_count
        )));
    }
    let shards = partition(&train, &config.partition.spec()?)?;
    Ok(PreparedData {
        train,
        test,
        shards,
        layer_spec,
    })
}

/// 64-bit FNV-1a over the model's TLMD bytes, as 16 hex digits.
pub fn parameter_hash(model: &MlpModel) -> String {
    let mut h = fnv::FnvHasher::default();
    h.write(&model.to_bytes());
    format!("{:016x}", h.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub record: String,
    pub method: Method,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub parameter_hash: String,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub model: MlpModel,
    /// JSON lines: one per batch (or client round), then the summary.
    pub lines: Vec<String>,
    pub summary: RunSummary,
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Format(e.to_string()))
}

pub fn train_method(config: &ExperimentConfig, data: &PreparedData) -> Result<(MlpModel, Vec<String>)> {
    let spec = &data.layer_spec;
    let base = config.baseline_config();
    let collect = |o: crate::baselines::BaselineOutcome| -> Result<(MlpModel, Vec<String>)> {
        let lines = o.metrics.iter().map(to_json).collect::<Result<_>>()?;
        Ok((o.model, lines))
    };
    match config.training.method {
        Method::Cl => collect(train_cl(&data.centralized()?, spec, &base)?),
        Method::Fedavg => collect(train_fedavg(&data.shards, spec, &base)?),
        Method::Sl => collect(train_sl(&data.shards, spec, &base)?),
        Method::SlPlus => collect(train_sl_plus(&data.shards, spec, &base)?),
        Method::Sfl => collect(train_sfl(&data.shards, spec, &base)?),
        Method::Tl => {
            let nodes = data.shards.iter().cloned().map(NodeState::new).collect();
            let mut transport = SimTransport::new(nodes, LatencyModel::default())?;
            let out = train_tl(&mut transport, spec, &config.tl_config())?;
            let lines = out.metrics.iter().map(to_json).collect::<Result<_>>()?;
            Ok((out.model, lines))
        }
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunResult> {
    let data = prepare_data(config)?;
    run_prepared(config, &data)
}

pub fn run_prepared(config: &ExperimentConfig, data: &PreparedData) -> Result<RunResult> {
    let (model, mut lines) = train_method(config, data)?;
    let probs = model.predict(&data.test.features)?;
    let metrics = evaluate(&probs, &data.test.labels)?
        .into_iter()
        .map(|r| (r.metric, r.value))
        .collect();
    let summary = RunSummary {
        record: "summary".into(),
        method: config.training.method,
        seed: config.training.seed,
        metrics,
        parameter_hash: parameter_hash(&model),
    };
    lines.push(to_json(&summary)?);
    Ok(RunResult { model, lines, summary })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub parameter_distance: f64,
    pub prediction_agreement: f64,
    /// Metric of run A minus metric of run B.
    pub metric_deltas: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation (n − 1); zero for a single value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub method_a: Method,
    pub method_b: Method,
    pub seeds: Vec<SeedComparison>,
    pub metrics_a: BTreeMap<String, MeanStd>,
    pub metrics_b: BTreeMap<String, MeanStd>,
    pub metric_deltas: BTreeMap<String, MeanStd>,
    pub max_parameter_distance: f64,
    pub min_prediction_agreement: f64,
}

/// Runs both configurations with training seeds `seed + offset` for each offset in
/// `0..seed_count` and compares the resulting models on the test split.
pub fn compare(a: &ExperimentConfig, b: &ExperimentConfig, seed_count: usize) -> Result<CompareReport> {
    if a.model.layers.replace(' ', "") != b.model.layers.replace(' ', "") {
        return Err(Error::Config(format!(
            "model.layers differ: {:?} vs {:?}",
            a.model.layers, b.model.layers
        )));
    }
    let data_a = prepare_data(a)?;
    let data_b = prepare_data(b)?;
    let mut seeds = Vec::with_capacity(seed_count);
    let mut values_a: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut values_b: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for offset in 0..seed_count as u64 {
        let mut ca = a.clone();
        let mut cb = b.clone();
        ca.training.seed = a.training.seed.wrapping_add(offset);
        cb.training.seed = b.training.seed.wrapping_add(offset);
        let ra = run_prepared(&ca, &data_a)?;
        let rb = run_prepared(&cb, &data_b)?;
        let pa = ra.model.predict(&data_a.test.features)?.argmax_rows();
        let pb = rb.model.predict(&data_b.test.features)?.argmax_rows();
        let agree = pa.iter().zip(&pb).filter(|(x, y)| x == y).count() as f64 / pa.len().max(1) as f64;
        let mut deltas = BTreeMap::new();
        for (k, va) in &ra.summary.metrics {
            values_a.entry(k.clone()).or_default().push(*va);
            if let Some(vb) = rb.summary.metrics.get(k) {
                deltas.insert(k.clone(), va - vb);
            }
        }
        for (k, vb) in &rb.summary.metrics {
            values_b.entry(k.clone()).or_default().push(*vb);
        }
        seeds.push(SeedComparison {
            seed: ca.training.seed,
            parameter_distance: ra.model.max_abs_diff(&rb.model)?,
            prediction_agreement: agree,
            metric_deltas: deltas,
        });
    }
    let mut delta_values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in &seeds {
        for (k, v) in &s.metric_deltas {
            delta_values.entry(k.clone()).or_default().push(*v);
        }
    }
    let summarize = |m: BTreeMap<String, Vec<f64>>| m.into_iter().map(|(k, v)| (k, MeanStd::of(&v))).collect();
    Ok(CompareReport {
        method_a: a.training.method,
        method_b: b.training.method,
        max_parameter_distance: seeds.iter().map(|s| s.parameter_distance).fold(0.0, f64::max),
        min_prediction_agreement: seeds.iter().map(|s| s.prediction_agreement).fold(1.0, f64::min),
        seeds,
        metrics_a: summarize(values_a),
        metrics_b: summarize(values_b),
        metric_deltas: summarize(delta_values),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_vectors() {
        let mut h = fnv::FnvHasher::default();
        h.write(b"");
        assert_eq!(h.finish(), 0xcbf29ce484222325);
        let mut h = fnv::FnvHasher::default();
        h.write(b"a");
        assert_eq!(h.finish(), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn config_errors_name_fields() {
        let mut c = ExperimentConfig::default();
        c.training.learning_rate = 0.0;
        assert!(c.validate().unwrap_err().to_string().contains("learning_rate"));
        let mut c = ExperimentConfig::default();
        c.dataset.train_fraction = 1.0;
        assert!(c.validate().unwrap_err().to_string().contains("train_fraction"));
        assert!(ExperimentConfig::from_toml("[training]\nbogus = 1\n").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let text = "[training]\nmethod = \"fedavg\"\nmode = \"pipelined\"\naggregation = \"node-mean\"\n[partition]\nstrategy = \"label_skew\"\nshards_per_node = 1\n";
        let c = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(c.training.method, Method::Fedavg);
        assert_eq!(c.training.mode, ExecutionMode::Pipelined);
        assert_eq!(c.training.aggregation, Aggregation::NodeMean);
        let back = ExperimentConfig::from_toml(&toml::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert!((m.std - 2f64.sqrt()).abs() < 1e-15);
    }
}
