use std::borrow::Cow;

use crate::data::ClientData;
use crate::engine::{weighted_average, Envelope, FederationState, LocalContext, Strategy};
use crate::error::{FlError, Result};
use crate::model::{sgd_train, ModelSpec, ParamVector};

/// Vanilla federated averaging over a single global model.
#[derive(Clone, Copy, Debug, Default)]
pub struct FedAvg;

pub(crate) fn global(state: &FederationState, k: usize) -> Result<&ParamVector> {
    state
        .global_params
        .get(k)
        .ok_or_else(|| FlError::domain(format!("global model {k} does not exist")))
}

/// Local SGD from `start` for the configured number of epochs.
pub(crate) fn train_locally(ctx: &LocalContext<'_>, start: &ParamVector, client: &ClientData) -> Result<ParamVector> {
    sgd_train(
        ctx.spec,
        start,
        client,
        ctx.hyper.steps_for(client),
        ctx.hyper.lr,
        ctx.hyper.batch_size,
        ctx.seed,
    )
}

/// p_i-weighted average of the messages, folded in ascending client order.
pub(crate) fn fedavg_fold(messages: &[Envelope<ParamVector>]) -> Result<ParamVector> {
    let entries: Vec<(&ParamVector, f64)> = messages.iter().map(|m| (&m.payload, m.weight)).collect();
    weighted_average(&entries)
}

pub(crate) fn sort_messages<M>(messages: &mut [Envelope<M>]) {
    messages.sort_by_key(|m| m.client_id);
}

impl Strategy for FedAvg {
    type Message = ParamVector;

    fn name(&self) -> &'static str {
        "fedavg"
    }

    fn local_update(&self, ctx: &LocalContext<'_>, client: &ClientData) -> Result<ParamVector> {
        train_locally(ctx, global(ctx.state, 0)?, client)
    }

    fn aggregate(&mut self, state: &mut FederationState, mut messages: Vec<Envelope<ParamVector>>) -> Result<()> {
        sort_messages(&mut messages);
        let avg = fedavg_fold(&messages)?;
        match state.global_params.first_mut() {
            Some(g) => *g = avg,
            None => state.global_params.push(avg),
        }
        Ok(())
    }

    fn deployed_model<'s>(
        &'s self,
        state: &'s FederationState,
        spec: &'s ModelSpec,
        _client: &ClientData,
    ) -> Result<(Cow<'s, ModelSpec>, Cow<'s, ParamVector>)> {
        Ok((Cow::Borrowed(spec), Cow::Borrowed(global(state, 0)?)))
    }
}
