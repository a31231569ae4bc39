use std::borrow::Cow;

use crate::data::ClientData;
use crate::engine::fedavg::{fedavg_fold, global, sort_messages, train_locally};
use crate::engine::{Envelope, FederationState, LocalContext, Strategy};
use crate::error::Result;
use crate::model::{sgd_minimize, ModelObjective, ModelSpec, ParamVector, SgdConfig};
use crate::personal::{mixture_train, one_step_adapt, proximal_personalize, MetaObjective, PersonalizationHyper};
use crate::rng::{derive_seed, tags};

/// Global model from the updated globals, personal models stored as-is.
fn fold_pairs(state: &mut FederationState, mut messages: Vec<Envelope<(ParamVector, ParamVector)>>) -> Result<()> {
    sort_messages(&mut messages);
    let mut globals = Vec::with_capacity(messages.len());
    for m in messages {
        let (w, p) = m.payload;
        state.personal_params.insert(m.client_id, p);
        globals.push(Envelope { client_id: m.client_id, weight: m.weight, payload: w });
    }
    let avg = fedavg_fold(&globals)?;
    match state.global_params.first_mut() {
        Some(g) => *g = avg,
        None => state.global_params.push(avg),
    }
    Ok(())
}

fn personal_or_global(state: &FederationState, client_id: usize) -> Result<&ParamVector> {
    match state.personal_params.get(&client_id) {
        Some(p) => Ok(p),
        None => global(state, 0),
    }
}

/// Global/local mixture: each participant takes joint SGD steps on
/// `L(W) + lambda * L(W_i)`, sends back `W` and keeps `W_i`. With
/// `lambda = 0` the personal model never moves and clients deploy `W`.
#[derive(Clone, Copy, Debug)]
pub struct Mixture {
    pub hyper: PersonalizationHyper,
}

impl Mixture {
    pub fn new(hyper: PersonalizationHyper) -> Result<Self> {
        hyper.validate()?;
        Ok(Mixture { hyper })
    }
}

impl Strategy for Mixture {
    type Message = (ParamVector, ParamVector);

    fn name(&self) -> &'static str {
        "mixture"
    }

    fn local_update(&self, ctx: &LocalContext<'_>, client: &ClientData) -> Result<Self::Message> {
        let w = global(ctx.state, 0)?;
        let wi = personal_or_global(ctx.state, client.client_id)?;
        let cfg = SgdConfig {
            steps: ctx.hyper.steps_for(client),
            lr: ctx.hyper.lr,
            batch_size: ctx.hyper.batch_size,
            seed: ctx.seed,
        };
        mixture_train(client, ctx.spec, w, wi, self.hyper.lambda, &cfg)
    }

    fn aggregate(&mut self, state: &mut FederationState, messages: Vec<Envelope<Self::Message>>) -> Result<()> {
        fold_pairs(state, messages)
    }

    fn deployed_model<'s>(
        &'s self,
        state: &'s FederationState,
        spec: &'s ModelSpec,
        client: &ClientData,
    ) -> Result<(Cow<'s, ModelSpec>, Cow<'s, ParamVector>)> {
        let params = if self.hyper.lambda > 0.0 {
            personal_or_global(state, client.client_id)?
        } else {
            global(state, 0)?
        };
        Ok((Cow::Borrowed(spec), Cow::Borrowed(params)))
    }
}

/// FedAvg for the global model plus a personal model per participant,
/// trained from `W` on the local loss with a `lambda/2 ||W_i - W||^2` pull.
#[derive(Clone, Copy, Debug)]
pub struct Proximal {
    pub hyper: PersonalizationHyper,
}

impl Proximal {
    pub fn new(hyper: PersonalizationHyper) -> Result<Self> {
        hyper.validate()?;
        Ok(Proximal { hyper })
    }
}

impl Strategy for Proximal {
    type Message = (ParamVector, ParamVector);

    fn name(&self) -> &'static str {
        "proximal"
    }

    fn local_update(&self, ctx: &LocalContext<'_>, client: &ClientData) -> Result<Self::Message> {
        let w = global(ctx.state, 0)?;
        let updated = train_locally(ctx, w, client)?;
        let personal = proximal_personalize(
            client,
            ctx.spec,
            w,
            self.hyper.lambda,
            ctx.hyper.lr,
            self.hyper.local_steps,
            ctx.hyper.batch_size,
            derive_seed(ctx.seed, &[tags::PERSONAL]),
        )?;
        Ok((updated, personal))
    }

    fn aggregate(&mut self, state: &mut FederationState, messages: Vec<Envelope<Self::Message>>) -> Result<()> {
        fold_pairs(state, messages)
    }

    fn deployed_model<'s>(
        &'s self,
        state: &'s FederationState,
        spec: &'s ModelSpec,
        client: &ClientData,
    ) -> Result<(Cow<'s, ModelSpec>, Cow<'s, ParamVector>)> {
        Ok((Cow::Borrowed(spec), Cow::Borrowed(personal_or_global(state, client.client_id)?)))
    }
}

/// One-step meta personalization: local SGD on the meta loss
/// `L(W - alpha * grad L(W))`, FedAvg aggregation, and at deploy time each
/// client takes a single gradient step of size `alpha` on its own data.
#[derive(Clone, Copy, Debug)]
pub struct OneStep {
    pub hyper: PersonalizationHyper,
}

impl OneStep {
    pub fn new(hyper: PersonalizationHyper) -> Result<Self> {
        hyper.validate()?;
        Ok(OneStep { hyper })
    }
}

impl Strategy for OneStep {
    type Message = ParamVector;

    fn name(&self) -> &'static str {
        "onestep"
    }

    fn local_update(&self, ctx: &LocalContext<'_>, client: &ClientData) -> Result<ParamVector> {
        let w = global(ctx.state, 0)?;
        let obj = MetaObjective { inner: ModelObjective::new(ctx.spec, client), alpha: self.hyper.alpha };
        let cfg = SgdConfig {
            steps: ctx.hyper.steps_for(client),
            lr: ctx.hyper.lr,
            batch_size: ctx.hyper.batch_size,
            seed: ctx.seed,
        };
        ParamVector::new(sgd_minimize(&obj, w.as_slice().to_vec(), &cfg)?)
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
        client: &ClientData,
    ) -> Result<(Cow<'s, ModelSpec>, Cow<'s, ParamVector>)> {
        let adapted = one_step_adapt(client, spec, global(state, 0)?, self.hyper.alpha)?;
        Ok((Cow::Borrowed(spec), Cow::Owned(adapted)))
    }
}
