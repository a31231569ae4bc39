//! Differentiable models, losses and SGD shared by every strategy.

mod network;
mod params;
mod sgd;
mod spec;

pub use network::{
    forward, logits, loss_and_grad, mean_loss, per_example_loss, softmax_rows, Batch, LossKind, Targets,
};
pub(crate) use network::weighted_loss_and_grad;
pub use params::ParamVector;
pub use sgd::{
    sgd_minimize, sgd_minimize_with, sgd_train, steps_for_epochs, MinibatchSampler, ModelObjective, Objective,
    SgdConfig,
};
pub use spec::{Activation, LayerShape, ModelKind, ModelSpec, OutputHead, MAX_HIDDEN_LAYERS};

#[cfg(test)]
pub(crate) use sgd::test_objectives;
