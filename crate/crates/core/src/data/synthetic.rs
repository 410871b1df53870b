use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

const CENTROID_RADIUS: f64 = 4.0;

/// Gaussian blobs: one seeded centroid per class on the radius-4 hypersphere,
/// sample `i` belongs to class `i mod n_classes`, features are
/// `centroid + spread·N(0, I)`.
pub fn gen_synthetic(
    n_samples: usize,
    n_features: usize,
    n_classes: usize,
    cluster_spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_samples == 0 || n_features == 0 || n_classes == 0 {
        return Err(Error::Validation("synthetic dataset counts must be >= 1".into()));
    }
    if n_classes > n_samples {
        return Err(Error::Validation(format!(
            "{n_classes} classes cannot be balanced over {n_samples} samples"
        )));
    }
    if !(cluster_spread >= 0.0) || !cluster_spread.is_finite() {
        return Err(Error::Validation(format!("cluster spread must be >= 0, got {cluster_spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..n_features).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                break v.into_iter().map(|x| CENTROID_RADIUS * x / norm).collect();
            }
        })
        .collect();
    let mut data = Vec::with_capacity(n_samples * n_features);
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let class = i % n_classes;
        labels.push(class);
        for &c in &centroids[class] {
            let noise: f64 = StandardNormal.sample(&mut rng);
            data.push(c + cluster_spread * noise);
        }
    }
    Dataset::new(Matrix::from_vec(n_samples, n_features, data)?, labels, n_classes)
}
