use std::borrow::Cow;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ClientData;
use crate::engine::{FederationState, RoundRecord};
use crate::error::{FlError, Result};
use crate::metrics::accuracy;
use crate::model::{forward, mean_loss, steps_for_epochs, LossKind, ModelSpec, ParamVector};
use crate::rng::{derive_seed, rng_from, tags};

/// Local optimizer settings shared by all strategies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalHyper {
    pub lr: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
}

impl Default for LocalHyper {
    fn default() -> Self {
        LocalHyper { lr: 0.1, local_epochs: 1, batch_size: 16 }
    }
}

impl LocalHyper {
    pub fn steps_for(&self, client: &ClientData) -> usize {
        steps_for_epochs(client.len(), self.batch_size, self.local_epochs)
    }
}

/// Everything a participant receives from the coordinator for one round.
pub struct LocalContext<'a> {
    pub state: &'a FederationState,
    pub spec: &'a ModelSpec,
    pub hyper: &'a LocalHyper,
    /// Seed for this client's randomness in this round.
    pub seed: u64,
}

/// A participant's reply, tagged with its id and aggregation weight `p_i`.
pub struct Envelope<M> {
    pub client_id: usize,
    pub weight: f64,
    pub payload: M,
}

/// Uniform strategy interface: participants compute a message from the
/// global context; the coordinator folds the messages (in ascending client
/// id order) into a new global context.
pub trait Strategy: Sync {
    type Message: Send;

    fn name(&self) -> &'static str;

    fn local_update(&self, ctx: &LocalContext<'_>, client: &ClientData) -> Result<Self::Message>;

    fn aggregate(&mut self, state: &mut FederationState, messages: Vec<Envelope<Self::Message>>) -> Result<()>;

    /// The model `client` would use after this round.
    fn deployed_model<'s>(
        &'s self,
        state: &'s FederationState,
        spec: &'s ModelSpec,
        client: &ClientData,
    ) -> Result<(Cow<'s, ModelSpec>, Cow<'s, ParamVector>)>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundOptions {
    pub sample_fraction: f64,
    pub hyper: LocalHyper,
    pub parallel: bool,
}

impl Default for RoundOptions {
    fn default() -> Self {
        RoundOptions { sample_fraction: 1.0, hyper: LocalHyper::default(), parallel: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RoundOutcome {
    Completed(RoundRecord),
    /// No client has budget left; the simulation should stop.
    Halted { round: usize },
}

fn sample_participants(state: &FederationState, fraction: f64) -> Vec<usize> {
    let eligible = state.eligible_clients();
    let m = ((fraction * eligible.len() as f64).ceil() as usize).clamp(1, eligible.len());
    if m == eligible.len() {
        return eligible;
    }
    let mut rng = rng_from(derive_seed(state.rng_seed, &[tags::SAMPLE, state.round as u64]));
    let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, eligible.len(), m)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    chosen.sort_unstable();
    chosen
}

fn map_maybe_parallel<T, R, F>(items: &[T], parallel: bool, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    if parallel {
        items.par_iter().map(f).collect()
    } else {
        items.iter().map(f).collect()
    }
}

/// Global loss, per-client loss and per-client accuracy.
pub(crate) type Evaluation = (f64, BTreeMap<usize, f64>, BTreeMap<usize, f64>);

/// Per-client loss on training data and accuracy on `eval` for the models
/// each client would deploy.
pub(crate) fn evaluate<S: Strategy>(
    state: &FederationState,
    strategy: &S,
    clients: &[ClientData],
    eval: &[ClientData],
    spec: &ModelSpec,
    parallel: bool,
) -> Result<Evaluation> {
    let rows = map_maybe_parallel(clients, parallel, |client| {
        let (cspec, params) = strategy.deployed_model(state, spec, client)?;
        let loss_kind = LossKind::natural(&cspec);
        let loss = mean_loss(&cspec, &params, &client.batch(loss_kind), loss_kind)?;
        let acc = match eval.iter().find(|e| e.client_id == client.client_id) {
            Some(test) if cspec.is_classifier() => Some(accuracy(&forward(&cspec, &params, test.x.view())?, &test.y)),
            _ => None,
        };
        Ok((client.client_id, client.weight, loss, acc))
    })?;
    let mut global = 0.0;
    let mut losses = BTreeMap::new();
    let mut accs = BTreeMap::new();
    let mut sorted = rows;
    sorted.sort_by_key(|r| r.0);
    for (id, weight, loss, acc) in sorted {
        global += weight * loss;
        losses.insert(id, loss);
        if let Some(a) = acc {
            accs.insert(id, a);
        }
    }
    Ok((global, losses, accs))
}

/// Runs one federated round: seeded sampling among clients with budget
/// left, one access charged per participant, local updates (optionally in
/// parallel), a deterministic aggregation fold and evaluation.
pub fn run_round<S: Strategy>(
    state: &mut FederationState,
    strategy: &mut S,
    clients: &[ClientData],
    eval: &[ClientData],
    spec: &ModelSpec,
    opts: &RoundOptions,
) -> Result<RoundOutcome> {
    if !(opts.sample_fraction > 0.0 && opts.sample_fraction <= 1.0) {
        return Err(FlError::domain("sample_fraction must lie in (0, 1]"));
    }
    if state.eligible_clients().is_empty() {
        return Ok(RoundOutcome::Halted { round: state.round });
    }
    let participants = sample_participants(state, opts.sample_fraction);
    for &id in &participants {
        state.charge_access(id)?;
    }
    state.check_invariants()?;

    let selected: Vec<&ClientData> = participants
        .iter()
        .map(|id| {
            clients
                .iter()
                .find(|c| c.client_id == *id)
                .ok_or_else(|| FlError::domain(format!("client {id} has a budget but no data")))
        })
        .collect::<Result<_>>()?;

    let round = state.round as u64;
    let seed = state.rng_seed;
    let messages = {
        let shared: &FederationState = state;
        let strat: &S = strategy;
        map_maybe_parallel(&selected, opts.parallel, |client| {
            let ctx = LocalContext {
                state: shared,
                spec,
                hyper: &opts.hyper,
                seed: derive_seed(seed, &[tags::LOCAL, round, client.client_id as u64]),
            };
            Ok(Envelope {
                client_id: client.client_id,
                weight: client.weight,
                payload: strat.local_update(&ctx, client)?,
            })
        })?
    };

    strategy.aggregate(state, messages)?;
    state.round += 1;
    state.check_invariants()?;

    let (global_loss, per_client_loss, per_client_accuracy) =
        evaluate(state, strategy, clients, eval, spec, opts.parallel)?;
    Ok(RoundOutcome::Completed(RoundRecord {
        round: state.round - 1,
        global_loss,
        per_client_loss,
        per_client_accuracy,
        accesses_charged: participants.len(),
        participants,
    }))
}
