use crate::autodiff::{grad_check_reference, GradCheckReport, Matrix, Mode, ScalarFunction, Tape, TensorError, Var};
use crate::graph::HeteroGraph;
use crate::model::{forward_on_tape, GraphTensors, HyperParams, Model, ModelError, ModelParams};
use crate::rng::RngKey;
use crate::scalar::Scalar;

use super::{inverse_frequency_weights, multitask_loss, TrainError};

/// The eval-mode multi-task loss of a model on a fixed graph, as a function
/// of the flattened parameter list.
pub struct ModelLoss<'g> {
    pub graph: &'g HeteroGraph,
    pub hyper: HyperParams,
    pub lambda: f64,
}

impl ScalarFunction for ModelLoss<'_> {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var]) -> Result<Var, TensorError> {
        let shape = ModelParams::<Matrix<T>>::zeros(self.graph.f(), &self.hyper);
        let mut flat = params.iter();
        let vars = shape.map(|_, _| *flat.next().expect("one var per leaf"));
        let gt = GraphTensors::<T>::from_graph(self.graph);
        let fwd = forward_on_tape(tape, &gt, &vars, &self.hyper, Mode::Eval, RngKey::new(0)).map_err(|e| match e {
            ModelError::Tensor(t) => t,
            _ => TensorError::NonFinite("model forward"),
        })?;
        let weights = inverse_frequency_weights(&self.graph.labels.capacity);
        let loss = multitask_loss(tape, fwd.z_keep, fwd.z_cap, &self.graph.labels, self.lambda, weights).map_err(
            |e| match e {
                TrainError::Tensor(t) => t,
                _ => TensorError::NonFinite("model loss"),
            },
        )?;
        Ok(loss.total)
    }
}

/// Tape gradients of the full model loss at precision `A`, checked against
/// central differences at precision `R` around a fresh initialization.
pub fn model_grad_check<A: Scalar, R: Scalar>(
    graph: &HeteroGraph,
    hyper: &HyperParams,
    seed: u64,
    step: f64,
) -> Result<GradCheckReport, TrainError> {
    let model = Model::<A>::init(graph.f(), hyper.clone(), seed)?;
    let params: Vec<Matrix<A>> = model.params.leaves().into_iter().cloned().collect();
    let f = ModelLoss { graph, hyper: hyper.clone(), lambda: 0.5 };
    Ok(grad_check_reference::<A, R, _>(&f, &params, step)?)
}
