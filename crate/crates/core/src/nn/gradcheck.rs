//! Central finite-difference gradients, used as the numerical oracle for the
//! analytic backward pass.

use super::backward::GradientSet;
use super::loss::LossKind;
use super::model::{forward_full, MlpModel};
use super::precise::{nudge, precise_layers, precise_loss, to_precise, Dd, PreciseLayer};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// `(L(θ+ε) − L(θ−ε)) / 2ε` for every weight, bias, and first-layer activation.
///
/// The perturbed losses are evaluated in double-double precision so the difference
/// quotient is limited by truncation error, not by `f64` roundoff in the loss.
pub fn finite_diff_grad(
    model: &MlpModel,
    input: &Matrix,
    labels: &Matrix,
    kind: LossKind,
    eps: f64,
) -> Result<GradientSet> {
    if !(eps > 0.0) {
        return Err(Error::Validation(format!("eps must be positive, got {eps}")));
    }
    // Shape validation through the ordinary forward pass.
    let trace = forward_full(model, input)?;
    if trace.output().shape() != labels.shape() {
        return Err(Error::dim("finite_diff_grad labels", trace.output().shape(), labels.shape()));
    }
    let mut layers = precise_layers(model);
    let x0 = to_precise(input);
    let width = input.cols();
    let mut grads = GradientSet::zeros_like(model, input.rows());
    let central = |layers: &mut Vec<_>, pick: &dyn Fn(&mut Vec<PreciseLayer>) -> &mut Dd| {
        let orig = *pick(layers);
        nudge(pick(layers), eps);
        let plus = precise_loss(layers, 0, &x0, width, labels, kind);
        *pick(layers) = orig;
        nudge(pick(layers), -eps);
        let minus = precise_loss(layers, 0, &x0, width, labels, kind);
        *pick(layers) = orig;
        (plus - minus).to_f64() / (2.0 * eps)
    };

    for l in 0..model.depth() {
        for i in 0..model.layers()[l].weights.data().len() {
            grads.weight_grads[l].data_mut()[i] = central(&mut layers, &|ls| &mut ls[l].weights[i]);
        }
        for i in 0..model.layers()[l].biases.len() {
            grads.bias_grads[l][i] = central(&mut layers, &|ls| &mut ls[l].biases[i]);
        }
    }

    if model.depth() >= 2 {
        let x1 = &trace.activations[0];
        let mut probe = to_precise(x1);
        for i in 0..probe.len() {
            let orig = probe[i];
            nudge(&mut probe[i], eps);
            let plus = precise_loss(&layers, 1, &probe, x1.cols(), labels, kind);
            probe[i] = orig;
            nudge(&mut probe[i], -eps);
            let minus = precise_loss(&layers, 1, &probe, x1.cols(), labels, kind);
            probe[i] = orig;
            grads.input_grad.data_mut()[i] = (plus - minus).to_f64() / (2.0 * eps);
        }
    }
    Ok(grads)
}

/// `|a − b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Worst relative error over every entry of two gradient sets, input gradient included.
pub fn max_relative_error(a: &GradientSet, b: &GradientSet) -> f64 {
    let mut worst: f64 = 0.0;
    let pairs = a
        .weight_grads
        .iter()
        .zip(&b.weight_grads)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .chain(a.bias_grads.iter().flatten().zip(b.bias_grads.iter().flatten()))
        .chain(a.input_grad.data().iter().zip(b.input_grad.data()));
    for (x, y) in pairs {
        worst = worst.max(relative_error(*x, *y));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, DenseLayer, LayerSpec};

    #[test]
    fn linear_mse_matches_closed_form() {
        // L = (1/k) Σ_o (w_o·x + b_o − y_o)², so ∂L/∂w_oi = 2 r_o x_i / k.
        let w = Matrix::from_rows(&[vec![0.3, -0.7], vec![1.2, 0.4]]).unwrap();
        let layer = DenseLayer::new(w.clone(), vec![0.1, -0.2], Activation::Identity).unwrap();
        let model = MlpModel::new(vec![layer]).unwrap();
        let x = Matrix::from_rows(&[vec![0.9, -1.3]]).unwrap();
        let y = Matrix::from_rows(&[vec![0.5, 2.0]]).unwrap();
        let fd = finite_diff_grad(&model, &x, &y, LossKind::Mse, 1e-6).unwrap();
        for o in 0..2 {
            let r = w.get(o, 0) * 0.9 + w.get(o, 1) * -1.3 + [0.1, -0.2][o] - y.get(0, o);
            for i in 0..2 {
                let exact = 2.0 * r * x.get(0, i) / 2.0;
                assert!(relative_error(fd.weight_grads[0].get(o, i), exact) < 1e-8);
            }
            assert!(relative_error(fd.bias_grads[0][o], r) < 1e-8);
        }
    }

    #[test]
    fn dead_relu_units_have_zero_gradient() {
        let spec = [
            LayerSpec::new(2, 3, Activation::Relu),
            LayerSpec::new(3, 2, Activation::Softmax),
        ];
        let mut model = MlpModel::init(&spec, 4).unwrap();
        model.layers_mut()[0].biases = vec![-100.0; 3];
        let x = Matrix::from_rows(&[vec![0.5, 0.5], vec![-0.2, 1.0]]).unwrap();
        let y = crate::nn::one_hot(&[0, 1], 2).unwrap();
        let fd = finite_diff_grad(&model, &x, &y, LossKind::CrossEntropy, 1e-6).unwrap();
        assert!(fd.weight_grads[0].data().iter().all(|&g| g == 0.0));
        assert!(fd.bias_grads[0].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn rejects_non_positive_eps() {
        let model = MlpModel::init(&[LayerSpec::new(1, 1, Activation::Identity)], 0).unwrap();
        let x = Matrix::zeros(1, 1);
        assert!(finite_diff_grad(&model, &x, &x, LossKind::Mse, 0.0).is_err());
    }
}
