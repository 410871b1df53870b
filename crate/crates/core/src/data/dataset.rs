use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::one_hot;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::Validation(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.rows()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_count(&self) -> usize {
        self.features.cols()
    }

    /// Rows in the given order; class count is preserved.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    pub fn one_hot_labels(&self) -> Matrix {
        one_hot(&self.labels, self.class_count).expect("labels validated at construction")
    }

    /// Concatenates datasets with equal feature width, in order.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let features = Matrix::vstack(&parts.iter().map(|d| &d.features).collect::<Vec<_>>())?;
        let labels = parts.iter().flat_map(|d| d.labels.iter().copied()).collect();
        let class_count = parts.iter().map(|d| d.class_count).max().unwrap_or(0);
        Dataset::new(features, labels, class_count)
    }

    /// Seeded shuffle, then the first `round(frac·n)` rows (at least one, at most n−1) train.
    pub fn train_test_split(&self, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::Validation(format!(
                "train fraction must lie in (0,1), got {train_fraction}"
            )));
        }
        if self.len() < 2 {
            return Err(Error::Validation("need at least two samples to split".into()));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((self.len() as f64 * train_fraction).round() as usize).clamp(1, self.len() - 1);
        Ok((self.subset(&idx[..n_train]), self.subset(&idx[n_train..])))
    }
}

/// Per-column mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population statistics; constant columns get a unit scale.
    pub fn fit(features: &Matrix) -> Self {
        let n = features.rows().max(1) as f64;
        let mean: Vec<f64> = features.column_sums().into_iter().map(|s| s / n).collect();
        let mut var = vec![0.0; features.cols()];
        for r in 0..features.rows() {
            for (c, v) in features.row(r).iter().enumerate() {
                var[c] += (v - mean[c]) * (v - mean[c]);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, features: &Matrix) -> Matrix {
        let mut out = features.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeShard {
    pub node_id: u32,
    pub dataset: Dataset,
}

impl NodeShard {
    /// Local indices are always `0..len`.
    pub fn local_index_range(&self) -> std::ops::Range<usize> {
        0..self.dataset.len()
    }
}
