use std::borrow::Cow;
use std::collections::BTreeMap;

use ndarray::Array2;

use crate::data::ClientData;
use crate::distill::{
    average_predictions, distill_update, public_predictions, DistillHyper, HeteroModelRegistry, PredictionMatrix,
};
use crate::engine::fedavg::sort_messages;
use crate::engine::{Envelope, FederationState, LocalContext, Strategy};
use crate::error::{FlError, Result};
use crate::model::{sgd_train, steps_for_epochs, ModelSpec, ParamVector, SgdConfig};
use crate::rng::{derive_seed, tags};

/// Model-heterogeneous federation. Every client keeps its own architecture
/// and parameters; the only thing that crosses client boundaries is a
/// prediction matrix on the public set. In the first round clients train on
/// private data only; afterwards each learns from the uniform average of
/// the other clients' latest predictions plus `lambda` times its private
/// cross-entropy.
#[derive(Clone, Debug)]
pub struct Distill {
    registry: HeteroModelRegistry,
    hyper: DistillHyper,
    public_x: Array2<f64>,
    initial: BTreeMap<usize, ParamVector>,
    latest: BTreeMap<usize, PredictionMatrix>,
}

impl Distill {
    pub fn new(registry: HeteroModelRegistry, hyper: DistillHyper, public_x: Array2<f64>, seed: u64) -> Result<Self> {
        hyper.validate()?;
        if public_x.ncols() != registry.input_dim() {
            return Err(FlError::shape("public set does not match the registered input dimension"));
        }
        let initial = registry
            .iter()
            .map(|(id, spec)| (id, spec.init_params(derive_seed(seed, &[tags::INIT, id as u64]))))
            .collect();
        Ok(Distill { registry, hyper, public_x, initial, latest: BTreeMap::new() })
    }

    pub fn registry(&self) -> &HeteroModelRegistry {
        &self.registry
    }

    /// Most recent public predictions per client.
    pub fn latest_predictions(&self) -> &BTreeMap<usize, PredictionMatrix> {
        &self.latest
    }

    /// Consensus for `client_id`: uniform mean of the stored predictions,
    /// leaving the client's own out when configured. `None` before any
    /// predictions from other clients exist.
    pub fn consensus_for(&self, client_id: usize) -> Result<Option<PredictionMatrix>> {
        let mats: Vec<&PredictionMatrix> = self
            .latest
            .iter()
            .filter(|(&id, _)| !(self.hyper.leave_one_out && id == client_id))
            .map(|(_, m)| m)
            .collect();
        if mats.is_empty() {
            return Ok(None);
        }
        let weights = vec![1.0; mats.len()];
        average_predictions(&mats, &weights).map(Some)
    }

    fn params_of<'s>(&'s self, state: &'s FederationState, client_id: usize) -> Result<&'s ParamVector> {
        state
            .personal_params
            .get(&client_id)
            .or_else(|| self.initial.get(&client_id))
            .ok_or_else(|| FlError::config(format!("no model registered for client {client_id}")))
    }
}

impl Strategy for Distill {
    type Message = (ParamVector, PredictionMatrix);

    fn name(&self) -> &'static str {
        "distill"
    }

    fn local_update(&self, ctx: &LocalContext<'_>, client: &ClientData) -> Result<Self::Message> {
        let id = client.client_id;
        let spec = self.registry.get(id)?;
        let start = self.params_of(ctx.state, id)?;
        let hyper = ctx.hyper;
        let params = match self.consensus_for(id)? {
            None => sgd_train(spec, start, client, hyper.steps_for(client), hyper.lr, hyper.batch_size, ctx.seed)?,
            Some(consensus) => {
                let rows = self.public_x.nrows() + client.len();
                let cfg = SgdConfig {
                    steps: steps_for_epochs(rows, hyper.batch_size, hyper.local_epochs),
                    lr: hyper.lr,
                    batch_size: hyper.batch_size,
                    seed: derive_seed(ctx.seed, &[tags::DISTILL]),
                };
                distill_update(spec, start, self.public_x.view(), &consensus, client, &self.hyper, &cfg)?
            }
        };
        let preds = public_predictions(spec, &params, self.public_x.view(), id, ctx.state.round)?;
        Ok((params, preds))
    }

    fn aggregate(&mut self, state: &mut FederationState, mut messages: Vec<Envelope<Self::Message>>) -> Result<()> {
        sort_messages(&mut messages);
        for m in messages {
            let (params, preds) = m.payload;
            state.personal_params.insert(m.client_id, params);
            self.latest.insert(m.client_id, preds);
        }
        Ok(())
    }

    fn deployed_model<'s>(
        &'s self,
        state: &'s FederationState,
        _spec: &'s ModelSpec,
        client: &ClientData,
    ) -> Result<(Cow<'s, ModelSpec>, Cow<'s, ParamVector>)> {
        let spec = self.registry.get(client.client_id)?;
        Ok((Cow::Borrowed(spec), Cow::Borrowed(self.params_of(state, client.client_id)?)))
    }
}
