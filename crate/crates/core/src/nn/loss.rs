//! Batch-mean losses and the last-layer delta `∂L/∂Z⁽ᴸ⁾`.
//!
//! The batch denominator is explicit so a node holding part of a virtual batch can
//! scale its rows by the full batch size. Summing those rows over all nodes then
//! reproduces the centralized delta exactly.
//!
//! Conventions:
//! - cross entropy: `L = -(1/B) Σ y·ln(max(ŷ, 1e-12))`; with a softmax output the
//!   fused delta `(ŷ - y)/B` is used.
//! - mse: `L = (1/(B·k)) Σ (ŷ - y)²`, `∂L/∂ŷ = 2(ŷ - y)/(B·k)`.

use serde::{Deserialize, Serialize};

use super::Activation;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const LOG_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

impl LossKind {
    pub fn tag(self) -> u8 {
        match self {
            LossKind::CrossEntropy => 0,
            LossKind::Mse => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(LossKind::CrossEntropy),
            1 => Ok(LossKind::Mse),
            t => Err(Error::Format(format!("unknown loss tag {t}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossDelta {
    /// Sum of per-sample losses divided by the batch denominator.
    pub loss: f64,
    pub delta: Matrix,
}

/// Loss and `∂L/∂Z⁽ᴸ⁾` for the output layer.
///
/// `denominator` is the batch size B the loss is averaged over; it may exceed
/// `predictions.rows()` when the rows are one node's share of a larger batch.
pub fn loss_and_delta(
    predictions: &Matrix,
    pre_activation: &Matrix,
    activation: Activation,
    labels: &Matrix,
    kind: LossKind,
    denominator: usize,
) -> Result<LossDelta> {
    if predictions.shape() != labels.shape() {
        return Err(Error::dim("loss labels", predictions.shape(), labels.shape()));
    }
    if predictions.shape() != pre_activation.shape() {
        return Err(Error::dim(
            "loss pre-activation",
            predictions.shape(),
            pre_activation.shape(),
        ));
    }
    if denominator == 0 {
        return Err(Error::Validation("loss denominator must be positive".into()));
    }
    let b = denominator as f64;
    match kind {
        LossKind::CrossEntropy => {
            check_one_hot(labels)?;
            let mut total = 0.0;
            for (p, y) in predictions.data().iter().zip(labels.data()) {
                if *y != 0.0 {
                    total -= y * p.max(LOG_EPSILON).ln();
                }
            }
            let delta = if activation == Activation::Softmax {
                predictions.zip_map(labels, |p, y| (p - y) / b)?
            } else {
                let grad = predictions.zip_map(labels, |p, y| {
                    if y != 0.0 && p > LOG_EPSILON {
                        -y / (p * b)
                    } else {
                        0.0
                    }
                })?;
                activation.backprop(pre_activation, predictions, &grad)?
            };
            Ok(LossDelta {
                loss: total / b,
                delta,
            })
        }
        LossKind::Mse => {
            let k = predictions.cols() as f64;
            let total: f64 = predictions
                .data()
                .iter()
                .zip(labels.data())
                .map(|(p, y)| (p - y) * (p - y))
                .sum();
            let grad = predictions.zip_map(labels, |p, y| 2.0 * (p - y) / (b * k))?;
            let delta = activation.backprop(pre_activation, predictions, &grad)?;
            Ok(LossDelta {
                loss: total / (b * k),
                delta,
            })
        }
    }
}

/// Loss only, averaged over `denominator`.
pub fn loss_value(predictions: &Matrix, labels: &Matrix, kind: LossKind, denominator: usize) -> Result<f64> {
    if predictions.shape() != labels.shape() {
        return Err(Error::dim("loss labels", predictions.shape(), labels.shape()));
    }
    let b = denominator as f64;
    Ok(match kind {
        LossKind::CrossEntropy => {
            let mut total = 0.0;
            for (p, y) in predictions.data().iter().zip(labels.data()) {
                if *y != 0.0 {
                    total -= y * p.max(LOG_EPSILON).ln();
                }
            }
            total / b
        }
        LossKind::Mse => {
            let k = predictions.cols() as f64;
            let total: f64 = predictions
                .data()
                .iter()
                .zip(labels.data())
                .map(|(p, y)| (p - y) * (p - y))
                .sum();
            total / (b * k)
        }
    })
}

fn check_one_hot(labels: &Matrix) -> Result<()> {
    for r in 0..labels.rows() {
        let row = labels.row(r);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(Error::Validation(format!(
                "cross entropy expects one-hot label rows; row {r} is {row:?}"
            )));
        }
    }
    Ok(())
}

/// One-hot encodes class ids into a `len × classes` matrix.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(labels.len(), classes);
    for (r, &c) in labels.iter().enumerate() {
        if c >= classes {
            return Err(Error::Validation(format!(
                "label {c} out of range for {classes} classes"
            )));
        }
        m.set(r, c, 1.0);
    }
    Ok(m)
}
