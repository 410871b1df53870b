//! From-scratch dense network: forward traces, losses, backward pass, SGD, and a
//! finite-difference gradient oracle. All math is `f64`.

mod activation;
mod backward;
mod gradcheck;
mod loss;
mod model;
mod precise;

pub use activation::Activation;
pub use backward::{
    backprop, backward_from_delta, sgd_step, sgd_step_in_place, GradientSet, PartialGradients,
};
pub use gradcheck::{finite_diff_grad, max_relative_error, relative_error};
pub use loss::{loss_and_delta, loss_value, one_hot, LossDelta, LossKind, LOG_EPSILON};
pub use model::{
    dense_forward, forward_from, forward_full, parse_layer_spec, validate_layer_spec, DenseLayer,
    ForwardTrace, LayerSpec, MlpModel, MODEL_MAGIC,
};

use crate::error::Result;
use crate::matrix::Matrix;

/// Forward, loss, and full backward on one batch with the batch-mean loss.
pub fn batch_gradients(
    model: &MlpModel,
    input: &Matrix,
    labels: &Matrix,
    kind: LossKind,
) -> Result<(f64, GradientSet)> {
    let trace = forward_full(model, input)?;
    let ld = loss_and_delta(
        trace.output(),
        trace.pre_activations.last().expect("at least one layer"),
        model.output_activation(),
        labels,
        kind,
        input.rows(),
    )?;
    let grads = backward_from_delta(model, &trace, &ld.delta)?;
    Ok((ld.loss, grads))
}
