use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::data::ClientData;
use crate::distill::{HeteroModelRegistry, PredictionMatrix, CONSENSUS_MODEL_ID};
use crate::engine::{FederationState, LocalHyper};
use crate::error::{FlError, Result};
use crate::metrics::argmax;
use crate::model::{forward, mean_loss, sgd_train, LossKind, ModelSpec, ParamVector};
use crate::rng::{derive_seed, tags};

/// Share of each client's rows used for training; the rest is the
/// validation split whose loss the client reports.
const TRAIN_SHARE: f64 = 0.8;

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleMember {
    pub client_id: usize,
    pub spec: ModelSpec,
    pub params: ParamVector,
}

/// Uniform average of member class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleModel {
    members: Vec<EnsembleMember>,
}

impl EnsembleModel {
    pub fn new(members: Vec<EnsembleMember>) -> Result<Self> {
        let first = members.first().ok_or_else(|| FlError::domain("an ensemble needs at least one member"))?;
        let (d, c) = (first.spec.input_dim(), first.spec.output_dim());
        for m in &members {
            m.params.check_spec(&m.spec)?;
            if !m.spec.is_classifier() || m.spec.input_dim() != d || m.spec.output_dim() != c {
                return Err(FlError::shape(format!("ensemble member {} does not match the others", m.client_id)));
            }
        }
        Ok(EnsembleModel { members })
    }

    pub fn members(&self) -> &[EnsembleMember] {
        &self.members
    }

    pub fn member_ids(&self) -> Vec<usize> {
        self.members.iter().map(|m| m.client_id).collect()
    }

    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let share = 1.0 / self.members.len() as f64;
        let mut out: Option<Array2<f64>> = None;
        for m in &self.members {
            let p = forward(&m.spec, &m.params, x)?;
            match out.as_mut() {
                Some(acc) => acc.scaled_add(share, &p),
                None => out = Some(p * share),
            }
        }
        Ok(out.expect("ensemble is non-empty"))
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(self.predict_proba(x)?.rows().into_iter().map(argmax).collect())
    }

    pub fn public_predictions(&self, x: ArrayView2<f64>, round: usize) -> Result<PredictionMatrix> {
        Ok(PredictionMatrix { rows: self.predict_proba(x)?, model_id: CONSENSUS_MODEL_ID, round })
    }
}

/// Keeps the `k_select` models with the lowest reported validation loss,
/// ties broken by client id.
pub fn select_ensemble(
    registry: &HeteroModelRegistry,
    client_params: &BTreeMap<usize, ParamVector>,
    validation_loss: &BTreeMap<usize, f64>,
    k_select: usize,
) -> Result<EnsembleModel> {
    if k_select == 0 || k_select > client_params.len() {
        return Err(FlError::domain(format!(
            "k_select must lie in [1, {}], got {k_select}",
            client_params.len()
        )));
    }
    let mut ranked: Vec<(usize, f64)> = client_params
        .keys()
        .map(|&id| {
            validation_loss
                .get(&id)
                .map(|&l| (id, l))
                .ok_or_else(|| FlError::domain(format!("client {id} reported no validation loss")))
        })
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut chosen: Vec<usize> = ranked.into_iter().take(k_select).map(|(id, _)| id).collect();
    chosen.sort_unstable();
    let members = chosen
        .into_iter()
        .map(|id| {
            Ok(EnsembleMember { client_id: id, spec: registry.get(id)?.clone(), params: client_params[&id].clone() })
        })
        .collect::<Result<_>>()?;
    EnsembleModel::new(members)
}

#[derive(Clone, Debug)]
pub struct OneShotOutcome {
    pub ensemble: EnsembleModel,
    pub client_params: BTreeMap<usize, ParamVector>,
    pub validation_loss: BTreeMap<usize, f64>,
    /// Clients charged for their single access, ascending.
    pub participants: Vec<usize>,
}

/// Single-round protocol: every client with budget left is charged one
/// access, trains its own model on the first 80% of its rows and reports
/// the model with its loss on the remaining rows. The coordinator ensembles
/// the `k_select` best.
pub fn one_shot_ensemble(
    state: &mut FederationState,
    registry: &HeteroModelRegistry,
    clients: &[ClientData],
    hyper: &LocalHyper,
    k_select: usize,
    parallel: bool,
) -> Result<OneShotOutcome> {
    let eligible = state.eligible_clients();
    let selected: Vec<&ClientData> = clients.iter().filter(|c| eligible.contains(&c.client_id)).collect();
    if k_select == 0 || k_select > selected.len() {
        return Err(FlError::domain(format!(
            "k_select must lie in [1, {}], got {k_select}",
            selected.len()
        )));
    }
    let mut participants: Vec<usize> = selected.iter().map(|c| c.client_id).collect();
    participants.sort_unstable();
    for &id in &participants {
        state.charge_access(id)?;
    }
    state.check_invariants()?;

    let seed = state.rng_seed;
    let round = state.round as u64;
    let work = |client: &&ClientData| -> Result<(usize, ParamVector, f64)> {
        let id = client.client_id;
        let spec = registry.get(id)?;
        let n_train = ((client.len() as f64 * TRAIN_SHARE).floor() as usize).max(1);
        let train = client.slice_rows(0, n_train);
        let valid = if n_train < client.len() { client.slice_rows(n_train, client.len()) } else { train.clone() };
        let init = spec.init_params(derive_seed(seed, &[tags::INIT, id as u64]));
        let local_seed = derive_seed(seed, &[tags::LOCAL, round, id as u64]);
        let params = sgd_train(spec, &init, &train, hyper.steps_for(&train), hyper.lr, hyper.batch_size, local_seed)?;
        let loss = mean_loss(spec, &params, &valid.batch(LossKind::CrossEntropy), LossKind::CrossEntropy)?;
        Ok((id, params, loss))
    };
    let results: Vec<(usize, ParamVector, f64)> = if parallel {
        selected.par_iter().map(work).collect::<Result<_>>()?
    } else {
        selected.iter().map(work).collect::<Result<_>>()?
    };

    let mut client_params = BTreeMap::new();
    let mut validation_loss = BTreeMap::new();
    for (id, params, loss) in results {
        client_params.insert(id, params);
        validation_loss.insert(id, loss);
    }
    let ensemble = select_ensemble(registry, &client_params, &validation_loss, k_select)?;
    state.personal_params.extend(client_params.iter().map(|(&id, p)| (id, p.clone())));
    state.round += 1;
    Ok(OneShotOutcome { ensemble, client_params, validation_loss, participants })
}
