use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Activation applied after a dense layer's affine transform.
///
/// `Relu` uses a derivative of 0 at exactly zero; `Elu` uses α = 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
    Elu,
    Softmax,
}

impl Activation {
    pub const ALL: [Activation; 6] = [
        Activation::Identity,
        Activation::Relu,
        Activation::Sigmoid,
        Activation::Tanh,
        Activation::Elu,
        Activation::Softmax,
    ];

    pub fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
            Activation::Tanh => 3,
            Activation::Elu => 4,
            Activation::Softmax => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::Sigmoid,
            3 => Activation::Tanh,
            4 => Activation::Elu,
            5 => Activation::Softmax,
            other => return Err(Error::Format(format!("unknown activation tag {other}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Elu => "elu",
            Activation::Softmax => "softmax",
        }
    }

    pub fn apply(self, z: &Matrix) -> Matrix {
        match self {
            Activation::Identity => z.clone(),
            Activation::Relu => z.map(|v| if v > 0.0 { v } else { 0.0 }),
            Activation::Sigmoid => z.map(sigmoid),
            Activation::Tanh => z.map(f64::tanh),
            Activation::Elu => z.map(|v| if v > 0.0 { v } else { v.exp_m1() }),
            Activation::Softmax => {
                let mut out = z.clone();
                for r in 0..out.rows() {
                    softmax_in_place(out.row_mut(r));
                }
                out
            }
        }
    }

    /// Pulls `grad_out = ∂L/∂f(z)` back to `∂L/∂z`. Softmax uses the full row Jacobian.
    pub fn backprop(self, z: &Matrix, activated: &Matrix, grad_out: &Matrix) -> Result<Matrix> {
        match self {
            Activation::Identity => Ok(grad_out.clone()),
            Activation::Relu => z.zip_map(grad_out, |z, g| if z > 0.0 { g } else { 0.0 }),
            Activation::Sigmoid => activated.zip_map(grad_out, |s, g| g * s * (1.0 - s)),
            Activation::Tanh => activated.zip_map(grad_out, |t, g| g * (1.0 - t * t)),
            Activation::Elu => z.zip_map(grad_out, |z, g| if z > 0.0 { g } else { g * z.exp() }),
            Activation::Softmax => {
                if activated.shape() != grad_out.shape() {
                    return Err(Error::dim("softmax backprop", activated.shape(), grad_out.shape()));
                }
                let mut out = Matrix::zeros(grad_out.rows(), grad_out.cols());
                for r in 0..out.rows() {
                    let y = activated.row(r);
                    let g = grad_out.row(r);
                    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    for (o, (yi, gi)) in out.row_mut(r).iter_mut().zip(y.iter().zip(g)) {
                        *o = yi * (gi - dot);
                    }
                }
                Ok(out)
            }
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Activation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown activation {s:?}")))
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
