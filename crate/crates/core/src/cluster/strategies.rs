use std::borrow::Cow;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cluster::{assign_by_loss, em_fold, farthest_point_centers, hierarchical_split, ClientModel, SimilarityMatrix};
use crate::data::ClientData;
use crate::engine::fedavg::{fedavg_fold, global, sort_messages, train_locally};
use crate::engine::{weighted_average, Envelope, FederationState, LocalContext, Strategy};
use crate::error::{FlError, Result};
use crate::model::{ModelSpec, ParamVector};

fn assigned_center(state: &FederationState, client_id: usize) -> usize {
    state.assignments.get(&client_id).copied().unwrap_or(0)
}

fn deployed_center<'s>(
    state: &'s FederationState,
    spec: &'s ModelSpec,
    client: &ClientData,
) -> Result<(Cow<'s, ModelSpec>, Cow<'s, ParamVector>)> {
    let k = assigned_center(state, client.client_id);
    Ok((Cow::Borrowed(spec), Cow::Borrowed(global(state, k)?)))
}

fn to_models(messages: &[Envelope<ParamVector>]) -> Vec<ClientModel> {
    messages
        .iter()
        .map(|m| ClientModel { client_id: m.client_id, weight: m.weight, params: m.payload.clone() })
        .collect()
}

/// Warm-up: FedAvg the first round's client models, pick K of them by
/// farthest-point sampling and run one EM fold from there.
fn initialize_centers(state: &mut FederationState, messages: &[Envelope<ParamVector>], k: usize) -> Result<Vec<f64>> {
    let mean = fedavg_fold(messages)?;
    let models = to_models(messages);
    let centers = farthest_point_centers(&models, &mean, k);
    let fold = em_fold(&models, &centers)?;
    state.global_params = fold.centers;
    state.assignments.extend(fold.assignment);
    Ok(vec![fold.objective_before, fold.objective_after])
}

/// Multi-center federation: K global models refit by a stochastic EM step
/// each round. Clients train from their current center (E-step inputs),
/// are reassigned to the nearest center in parameter space and every center
/// becomes the p_i-weighted mean of its members.
#[derive(Clone, Debug)]
pub struct MultiCenter {
    k: usize,
    initialized: bool,
    /// EM objective before and after the M-step, one pair per round.
    pub objective_trace: Vec<(f64, f64)>,
}

impl MultiCenter {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(FlError::config("multicenter needs k >= 1"));
        }
        Ok(MultiCenter { k, initialized: false, objective_trace: Vec::new() })
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

impl Strategy for MultiCenter {
    type Message = ParamVector;

    fn name(&self) -> &'static str {
        "multicenter"
    }

    fn local_update(&self, ctx: &LocalContext<'_>, client: &ClientData) -> Result<ParamVector> {
        let k = assigned_center(ctx.state, client.client_id);
        train_locally(ctx, global(ctx.state, k)?, client)
    }

    fn aggregate(&mut self, state: &mut FederationState, mut messages: Vec<Envelope<ParamVector>>) -> Result<()> {
        sort_messages(&mut messages);
        if !self.initialized {
            let obj = initialize_centers(state, &messages, self.k)?;
            self.objective_trace.push((obj[0], obj[1]));
            self.initialized = true;
            return Ok(());
        }
        let fold = em_fold(&to_models(&messages), &state.global_params)?;
        self.objective_trace.push((fold.objective_before, fold.objective_after));
        state.global_params = fold.centers;
        state.assignments.extend(fold.assignment);
        Ok(())
    }

    fn deployed_model<'s>(
        &'s self,
        state: &'s FederationState,
        spec: &'s ModelSpec,
        client: &ClientData,
    ) -> Result<(Cow<'s, ModelSpec>, Cow<'s, ParamVector>)> {
        deployed_center(state, spec, client)
    }
}

/// Hypothesis clustering: each participant evaluates every center on its
/// own data, trains the one with the lowest loss and reports back which
/// center it chose. Centers are the p_i-weighted means of their members;
/// a center nobody chose this round is left unchanged.
#[derive(Clone, Debug)]
pub struct Hypothesis {
    k: usize,
    initialized: bool,
}

impl Hypothesis {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(FlError::config("hypothesis clustering needs k >= 1"));
        }
        Ok(Hypothesis { k, initialized: false })
    }
}

impl Strategy for Hypothesis {
    /// Chosen center (absent during warm-up) and the trained parameters.
    type Message = (Option<usize>, ParamVector);

    fn name(&self) -> &'static str {
        "hypothesis"
    }

    fn local_update(&self, ctx: &LocalContext<'_>, client: &ClientData) -> Result<Self::Message> {
        if !self.initialized {
            return Ok((None, train_locally(ctx, global(ctx.state, 0)?, client)?));
        }
        let k = assign_by_loss(client, &ctx.state.global_params, ctx.spec)?;
        Ok((Some(k), train_locally(ctx, &ctx.state.global_params[k], client)?))
    }

    fn aggregate(&mut self, state: &mut FederationState, mut messages: Vec<Envelope<Self::Message>>) -> Result<()> {
        sort_messages(&mut messages);
        if !self.initialized {
            let plain: Vec<Envelope<ParamVector>> = messages
                .into_iter()
                .map(|m| Envelope { client_id: m.client_id, weight: m.weight, payload: m.payload.1 })
                .collect();
            initialize_centers(state, &plain, self.k)?;
            self.initialized = true;
            return Ok(());
        }
        let mut members: BTreeMap<usize, Vec<(&ParamVector, f64)>> = BTreeMap::new();
        for m in &messages {
            let k = m.payload.0.ok_or_else(|| FlError::domain("participant did not report a cluster"))?;
            members.entry(k).or_default().push((&m.payload.1, m.weight));
            state.assignments.insert(m.client_id, k);
        }
        for (k, entries) in members {
            state.global_params[k] = weighted_average(&entries)?;
        }
        Ok(())
    }

    fn deployed_model<'s>(
        &'s self,
        state: &'s FederationState,
        spec: &'s ModelSpec,
        client: &ClientData,
    ) -> Result<(Cow<'s, ModelSpec>, Cow<'s, ParamVector>)> {
        deployed_center(state, spec, client)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalConfig {
    /// A split is kept only when every cross-group similarity is below this.
    pub split_threshold: f64,
    pub min_cluster_size: usize,
    /// Splits are attempted during rounds `0..split_rounds` only; later
    /// updates of a converged group are mostly noise.
    pub split_rounds: usize,
}

impl Default for HierarchicalConfig {
    fn default() -> Self {
        HierarchicalConfig { split_threshold: 0.0, min_cluster_size: 2, split_rounds: 3 }
    }
}

/// Hierarchical clustering on update similarity. Every group keeps its own
/// model; after aggregation the participants of each group are split
/// recursively by the cosine similarity of their updates `W_i - W_group`.
#[derive(Clone, Debug)]
pub struct Hierarchical {
    cfg: HierarchicalConfig,
    /// Client-id partitions produced by each split event.
    pub split_log: Vec<(usize, Vec<Vec<usize>>)>,
}

impl Hierarchical {
    pub fn new(cfg: HierarchicalConfig) -> Self {
        Hierarchical { cfg, split_log: Vec::new() }
    }
}

/// Trained parameters and the update relative to the starting group model.
pub struct GroupUpdate {
    pub params: ParamVector,
    pub delta: ParamVector,
}

impl Strategy for Hierarchical {
    type Message = GroupUpdate;

    fn name(&self) -> &'static str {
        "hierarchical"
    }

    fn local_update(&self, ctx: &LocalContext<'_>, client: &ClientData) -> Result<GroupUpdate> {
        let start = global(ctx.state, assigned_center(ctx.state, client.client_id))?;
        let params = train_locally(ctx, start, client)?;
        let delta = params.delta(start)?;
        Ok(GroupUpdate { params, delta })
    }

    fn aggregate(&mut self, state: &mut FederationState, mut messages: Vec<Envelope<GroupUpdate>>) -> Result<()> {
        sort_messages(&mut messages);
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, m) in messages.iter().enumerate() {
            groups.entry(assigned_center(state, m.client_id)).or_default().push(i);
        }
        let mean_of = |idx: &[usize]| {
            let entries: Vec<(&ParamVector, f64)> =
                idx.iter().map(|&i| (&messages[i].payload.params, messages[i].weight)).collect();
            weighted_average(&entries)
        };

        let may_split = state.round < self.cfg.split_rounds;
        for (g, idx) in groups {
            state.global_params[g] = mean_of(&idx)?;
            if !may_split || idx.len() < 2 {
                continue;
            }
            let updates: Vec<ParamVector> = idx.iter().map(|&i| messages[i].payload.delta.clone()).collect();
            let sim = match SimilarityMatrix::from_updates(&updates) {
                Ok(s) => s,
                // a participant that did not move gives no direction to split on
                Err(FlError::UndefinedSimilarity) => continue,
                Err(e) => return Err(e),
            };
            let parts = hierarchical_split(&sim, self.cfg.split_threshold, self.cfg.min_cluster_size);
            if parts.len() < 2 {
                continue;
            }
            let mut logged = Vec::with_capacity(parts.len());
            for (p, part) in parts.iter().enumerate() {
                let members: Vec<usize> = part.iter().map(|&j| idx[j]).collect();
                let model = mean_of(&members)?;
                let target = if p == 0 {
                    state.global_params[g] = model;
                    g
                } else {
                    state.global_params.push(model);
                    state.global_params.len() - 1
                };
                for &i in &members {
                    state.assignments.insert(messages[i].client_id, target);
                }
                logged.push(members.iter().map(|&i| messages[i].client_id).collect());
            }
            self.split_log.push((state.round, logged));
        }
        for m in &messages {
            state.assignments.entry(m.client_id).or_insert(0);
        }
        Ok(())
    }

    fn deployed_model<'s>(
        &'s self,
        state: &'s FederationState,
        spec: &'s ModelSpec,
        client: &ClientData,
    ) -> Result<(Cow<'s, ModelSpec>, Cow<'s, ParamVector>)> {
        deployed_center(state, spec, client)
    }
}
