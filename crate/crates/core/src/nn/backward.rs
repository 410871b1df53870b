//! Backward pass and the plain SGD update.

use serde::{Deserialize, Serialize};

use super::model::{ForwardTrace, MlpModel};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Per-layer parameter gradients plus `∂L/∂X⁽¹⁾`, the gradient with respect to the
/// first layer's activation output.
///
/// For a single-layer model the first-layer activation is the network output and
/// `input_grad` is an empty `B × 0` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSet {
    pub weight_grads: Vec<Matrix>,
    pub bias_grads: Vec<Vec<f64>>,
    pub input_grad: Matrix,
}

impl GradientSet {
    pub fn zeros_like(model: &MlpModel, batch: usize) -> Self {
        Self {
            weight_grads: model
                .layers()
                .iter()
                .map(|l| Matrix::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            bias_grads: model.layers().iter().map(|l| vec![0.0; l.out_dim()]).collect(),
            input_grad: first_layer_grad_shape(model, batch),
        }
    }

    pub fn add(&self, other: &GradientSet) -> Result<GradientSet> {
        if self.weight_grads.len() != other.weight_grads.len() {
            return Err(Error::Validation("gradient sets have different depths".into()));
        }
        let weight_grads = self
            .weight_grads
            .iter()
            .zip(&other.weight_grads)
            .map(|(a, b)| a.add(b))
            .collect::<Result<_>>()?;
        let bias_grads = self
            .bias_grads
            .iter()
            .zip(&other.bias_grads)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        let input_grad = if self.input_grad.shape() == other.input_grad.shape() {
            self.input_grad.add(&other.input_grad)?
        } else {
            self.input_grad.clone()
        };
        Ok(GradientSet {
            weight_grads,
            bias_grads,
            input_grad,
        })
    }

    /// Largest absolute difference over all parameter gradients (the input gradient
    /// is not included).
    pub fn max_abs_diff(&self, other: &GradientSet) -> Result<f64> {
        if self.weight_grads.len() != other.weight_grads.len() {
            return Err(Error::Validation("gradient sets have different depths".into()));
        }
        let mut d: f64 = 0.0;
        for (a, b) in self.weight_grads.iter().zip(&other.weight_grads) {
            d = d.max(a.max_abs_diff(b)?);
        }
        for (a, b) in self.bias_grads.iter().zip(&other.bias_grads) {
            for (x, y) in a.iter().zip(b) {
                d = d.max((x - y).abs());
            }
        }
        Ok(d)
    }

    pub fn is_finite(&self) -> bool {
        self.weight_grads.iter().all(Matrix::is_finite)
            && self.bias_grads.iter().flatten().all(|v| v.is_finite())
            && self.input_grad.is_finite()
    }

    fn check_shapes(&self, model: &MlpModel) -> Result<()> {
        if self.weight_grads.len() != model.depth() || self.bias_grads.len() != model.depth() {
            return Err(Error::Validation(format!(
                "gradient set has {} layers, model has {}",
                self.weight_grads.len(),
                model.depth()
            )));
        }
        for (i, l) in model.layers().iter().enumerate() {
            if self.weight_grads[i].shape() != l.weights.shape() {
                return Err(Error::dim(
                    format!("layer {i} weight gradient"),
                    l.weights.shape(),
                    self.weight_grads[i].shape(),
                ));
            }
            if self.bias_grads[i].len() != l.biases.len() {
                return Err(Error::dim(
                    format!("layer {i} bias gradient"),
                    (1, l.biases.len()),
                    (1, self.bias_grads[i].len()),
                ));
            }
        }
        Ok(())
    }
}

fn first_layer_grad_shape(model: &MlpModel, batch: usize) -> Matrix {
    if model.depth() >= 2 {
        Matrix::zeros(batch, model.layers()[0].out_dim())
    } else {
        Matrix::zeros(batch, 0)
    }
}

/// Gradients for layers `trace.start..L`, with `deltas[i]` = `∂L/∂Z` of layer
/// `trace.start + i`.
#[derive(Debug, Clone)]
pub struct PartialGradients {
    pub start: usize,
    pub weight_grads: Vec<Matrix>,
    pub bias_grads: Vec<Vec<f64>>,
    pub deltas: Vec<Matrix>,
}

impl PartialGradients {
    /// `∂L/∂(input of layer start)`.
    pub fn input_gradient(&self, model: &MlpModel) -> Result<Matrix> {
        self.deltas[0].matmul(&model.layers()[self.start].weights)
    }

    /// `∂L/∂X⁽¹⁾` if layer 1 is inside the backpropagated range.
    pub fn first_layer_activation_grad(&self, model: &MlpModel) -> Result<Matrix> {
        let batch = self.deltas[0].rows();
        if model.depth() < 2 {
            return Ok(Matrix::zeros(batch, 0));
        }
        if self.start > 1 {
            return Err(Error::Validation(format!(
                "backward pass started at layer {}, cannot reach layer 1",
                self.start
            )));
        }
        self.deltas[1 - self.start].matmul(&model.layers()[1].weights)
    }
}

/// Backpropagates `delta_last` through layers `trace.start..L`.
///
/// `δ⁽ˡ⁾ = (δ⁽ˡ⁺¹⁾ · W⁽ˡ⁺¹⁾) ⊙ f′(Z⁽ˡ⁾)`, `∂L/∂W⁽ˡ⁾ = δ⁽ˡ⁾ᵀ · X⁽ˡ⁻¹⁾`,
/// `∂L/∂b⁽ˡ⁾ = Σ_rows δ⁽ˡ⁾`.
pub fn backprop(model: &MlpModel, trace: &ForwardTrace, delta_last: &Matrix) -> Result<PartialGradients> {
    let depth = model.depth();
    if trace.start >= depth || trace.pre_activations.len() != depth - trace.start {
        return Err(Error::Validation(format!(
            "trace covers layers {}..{} but model has {depth} layers",
            trace.start,
            trace.start + trace.pre_activations.len()
        )));
    }
    for (i, z) in trace.pre_activations.iter().enumerate() {
        let layer = &model.layers()[trace.start + i];
        if z.cols() != layer.out_dim() || z.rows() != trace.input.rows() {
            return Err(Error::Validation(format!(
                "trace layer {} has shape {:?}, incompatible with the model",
                trace.start + i,
                z.shape()
            )));
        }
    }
    let out_shape = trace.pre_activations[depth - trace.start - 1].shape();
    if delta_last.shape() != out_shape {
        return Err(Error::dim("delta_last", out_shape, delta_last.shape()));
    }

    let n = depth - trace.start;
    let mut deltas = vec![Matrix::zeros(0, 0); n];
    let mut weight_grads = vec![Matrix::zeros(0, 0); n];
    let mut bias_grads = vec![Vec::new(); n];
    let mut delta = delta_last.clone();
    for layer_idx in (trace.start..depth).rev() {
        let i = layer_idx - trace.start;
        let x_prev = trace.layer_input(layer_idx).expect("trace covers layer");
        weight_grads[i] = delta.t_matmul(x_prev)?;
        bias_grads[i] = delta.column_sums();
        let next = if layer_idx > trace.start {
            let below = &model.layers()[layer_idx - 1];
            let upstream = delta.matmul(&model.layers()[layer_idx].weights)?;
            Some(below.activation.backprop(
                &trace.pre_activations[i - 1],
                &trace.activations[i - 1],
                &upstream,
            )?)
        } else {
            None
        };
        deltas[i] = std::mem::replace(&mut delta, next.unwrap_or_else(|| Matrix::zeros(0, 0)));
    }
    Ok(PartialGradients {
        start: trace.start,
        weight_grads,
        bias_grads,
        deltas,
    })
}

/// Full backward pass from a trace produced by `forward_full`.
pub fn backward_from_delta(model: &MlpModel, trace: &ForwardTrace, delta_last: &Matrix) -> Result<GradientSet> {
    if trace.start != 0 {
        return Err(Error::Validation(
            "backward_from_delta needs a full trace starting at layer 0".into(),
        ));
    }
    let partial = backprop(model, trace, delta_last)?;
    let input_grad = partial.first_layer_activation_grad(model)?;
    Ok(GradientSet {
        weight_grads: partial.weight_grads,
        bias_grads: partial.bias_grads,
        input_grad,
    })
}

/// `W ← W − η·∂L/∂W`, `b ← b − η·∂L/∂b`.
pub fn sgd_step(model: &MlpModel, grads: &GradientSet, learning_rate: f64) -> Result<MlpModel> {
    let mut next = model.clone();
    sgd_step_in_place(&mut next, grads, learning_rate)?;
    Ok(next)
}

pub fn sgd_step_in_place(model: &mut MlpModel, grads: &GradientSet, learning_rate: f64) -> Result<()> {
    if !(learning_rate > 0.0) || !learning_rate.is_finite() {
        return Err(Error::Validation(format!(
            "learning_rate must be positive and finite, got {learning_rate}"
        )));
    }
    grads.check_shapes(model)?;
    for (layer, (gw, gb)) in model
        .layers_mut()
        .iter_mut()
        .zip(grads.weight_grads.iter().zip(&grads.bias_grads))
    {
        for (w, g) in layer.weights.data_mut().iter_mut().zip(gw.data()) {
            *w -= learning_rate * g;
        }
        for (b, g) in layer.biases.iter_mut().zip(gb) {
            *b -= learning_rate * g;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{forward_full, loss_and_delta, Activation, DenseLayer, LayerSpec, LossKind};

    #[test]
    fn zero_delta_gives_zero_gradients() {
        let spec = [
            LayerSpec::new(3, 4, Activation::Tanh),
            LayerSpec::new(4, 2, Activation::Softmax),
        ];
        let model = MlpModel::init(&spec, 1).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, -1.0, 1.0]]).unwrap();
        let trace = forward_full(&model, &x).unwrap();
        let g = backward_from_delta(&model, &trace, &Matrix::zeros(2, 2)).unwrap();
        assert!(g.weight_grads.iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
        assert!(g.bias_grads.iter().flatten().all(|&v| v == 0.0));
        assert!(g.input_grad.data().iter().all(|&v| v == 0.0));
        assert_eq!(g.input_grad.shape(), (2, 4));
    }

    #[test]
    fn single_linear_layer_gradient_is_outer_product() {
        let layer = DenseLayer::new(
            Matrix::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.0, 1.0, 1.0]]).unwrap(),
            vec![0.0, 0.0],
            Activation::Identity,
        )
        .unwrap();
        let model = MlpModel::new(vec![layer]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 2.0, -3.0]]).unwrap();
        let delta = Matrix::from_rows(&[vec![0.25, -2.0]]).unwrap();
        let trace = forward_full(&model, &x).unwrap();
        let g = backward_from_delta(&model, &trace, &delta).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                assert_eq!(g.weight_grads[0].get(o, i), delta.get(0, o) * x.get(0, i));
            }
        }
        assert_eq!(g.bias_grads[0], vec![0.25, -2.0]);
        assert_eq!(g.input_grad.shape(), (1, 0));
    }

    #[test]
    fn mismatched_delta_rejected() {
        let model = MlpModel::init(&[LayerSpec::new(2, 2, Activation::Relu)], 0).unwrap();
        let trace = forward_full(&model, &Matrix::zeros(3, 2)).unwrap();
        assert!(backward_from_delta(&model, &trace, &Matrix::zeros(2, 2)).is_err());
        let other = MlpModel::init(
            &[LayerSpec::new(2, 2, Activation::Relu), LayerSpec::new(2, 2, Activation::Relu)],
            0,
        )
        .unwrap();
        assert!(backward_from_delta(&other, &trace, &Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn sgd_arithmetic_and_errors() {
        let layer = DenseLayer::new(Matrix::from_rows(&[vec![1.0]]).unwrap(), vec![0.0], Activation::Identity).unwrap();
        let model = MlpModel::new(vec![layer]).unwrap();
        let mut g = GradientSet::zeros_like(&model, 1);
        assert_eq!(sgd_step(&model, &g, 0.3).unwrap(), model);
        g.weight_grads[0] = Matrix::from_rows(&[vec![0.25]]).unwrap();
        let next = sgd_step(&model, &g, 1.0).unwrap();
        assert_eq!(next.layers()[0].weights.data(), &[0.75]);
        assert!(sgd_step(&model, &g, 0.0).is_err());
        assert!(sgd_step(&model, &g, -1.0).is_err());
        assert!(sgd_step(&model, &g, f64::NAN).is_err());
    }

    #[test]
    fn recalculated_trace_backprop_matches_full() {
        let spec = [
            LayerSpec::new(3, 5, Activation::Elu),
            LayerSpec::new(5, 4, Activation::Sigmoid),
            LayerSpec::new(4, 3, Activation::Softmax),
        ];
        let model = MlpModel::init(&spec, 9).unwrap();
        let x = Matrix::from_rows(&[vec![0.3, -0.2, 1.1], vec![2.0, 0.1, -0.7]]).unwrap();
        let y = crate::nn::one_hot(&[2, 0], 3).unwrap();
        let trace = forward_full(&model, &x).unwrap();
        let ld = loss_and_delta(
            trace.output(),
            trace.pre_activations.last().unwrap(),
            Activation::Softmax,
            &y,
            LossKind::CrossEntropy,
            2,
        )
        .unwrap();
        let full = backward_from_delta(&model, &trace, &ld.delta).unwrap();
        let recalc = crate::nn::forward_from(&model, 1, &trace.activations[0]).unwrap();
        let partial = backprop(&model, &recalc, &ld.delta).unwrap();
        assert_eq!(partial.weight_grads[..], full.weight_grads[1..]);
        assert_eq!(partial.first_layer_activation_grad(&model).unwrap(), full.input_grad);
    }
}
