//! Clustered federations: several global models, each serving the clients
//! whose data it fits.
//!
//! * multi-center: clients attach to the nearest center in parameter space
//!   and centers are refit by a stochastic EM step;
//! * hierarchical: groups are recursively bi-partitioned by the cosine
//!   similarity of their members' updates;
//! * hypothesis: clients pick the center with the lowest loss on their data.

mod hierarchical;
mod strategies;

use std::collections::BTreeMap;

use crate::data::ClientData;
use crate::engine::{weighted_average, LocalHyper};
use crate::error::{FlError, Result};
use crate::model::{mean_loss, sgd_train, LossKind, ModelSpec, ParamVector};
use crate::rng::{derive_seed, tags};

pub use hierarchical::{gradient_cosine, hierarchical_split, SimilarityMatrix};
pub use strategies::{Hierarchical, HierarchicalConfig, Hypothesis, MultiCenter};

/// K global models and the cluster each client is attached to.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModelSet {
    pub centers: Vec<ParamVector>,
    pub assignment: BTreeMap<usize, usize>,
}

impl ClusterModelSet {
    pub fn new(centers: Vec<ParamVector>, assignment: BTreeMap<usize, usize>) -> Result<Self> {
        if centers.is_empty() {
            return Err(FlError::domain("a cluster model set needs at least one center"));
        }
        if let Some((id, k)) = assignment.iter().find(|(_, &k)| k >= centers.len()) {
            return Err(FlError::domain(format!("client {id} assigned to missing cluster {k}")));
        }
        Ok(ClusterModelSet { centers, assignment })
    }

    pub fn k(&self) -> usize {
        self.centers.len()
    }
}

/// Nearest center by squared L2 distance; ties go to the lowest index.
pub fn nearest_center(params: &ParamVector, centers: &[ParamVector]) -> Result<(usize, f64)> {
    if centers.is_empty() {
        return Err(FlError::domain("no centers to assign to"));
    }
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        if c.len() != params.len() {
            return Err(FlError::shape("center and client parameters differ in length"));
        }
        let d = params.sq_distance(c);
        if d < best.1 {
            best = (k, d);
        }
    }
    Ok(best)
}

/// `argmin_k ||W_i - W^(k)||^2` for every client.
pub fn assign_by_weights(client_params: &[ParamVector], centers: &[ParamVector]) -> Result<Vec<usize>> {
    if centers.is_empty() {
        return Err(FlError::domain("no centers to assign to"));
    }
    client_params.iter().map(|p| nearest_center(p, centers).map(|(k, _)| k)).collect()
}

/// `argmin_k L(D_i, W_k)` on the client's full dataset; ties go to the
/// lowest index.
pub fn assign_by_loss(client: &ClientData, centers: &[ParamVector], spec: &ModelSpec) -> Result<usize> {
    if centers.is_empty() {
        return Err(FlError::domain("no centers to assign to"));
    }
    let loss = LossKind::natural(spec);
    let batch = client.batch(loss);
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let l = mean_loss(spec, c, &batch, loss)?;
        if l < best.1 {
            best = (k, l);
        }
    }
    Ok(best.0)
}

/// A trained client model entering an EM fold.
#[derive(Clone, Debug)]
pub struct ClientModel {
    pub client_id: usize,
    pub weight: f64,
    pub params: ParamVector,
}

/// `sum_i p_i min_k ||W_i - W^(k)||^2`.
pub fn multicenter_objective(models: &[ClientModel], centers: &[ParamVector]) -> Result<f64> {
    let mut total = 0.0;
    for m in models {
        total += m.weight * nearest_center(&m.params, centers)?.1;
    }
    Ok(total)
}

/// Result of one E/M fold over trained client models.
#[derive(Clone, Debug)]
pub struct EmFold {
    pub centers: Vec<ParamVector>,
    pub assignment: BTreeMap<usize, usize>,
    /// Objective after the E-step, with the incoming centers.
    pub objective_before: f64,
    /// Objective after the M-step (and any repair).
    pub objective_after: f64,
}

fn cluster_mean(models: &[ClientModel], members: &[usize]) -> Result<ParamVector> {
    let entries: Vec<(&ParamVector, f64)> = members.iter().map(|&i| (&models[i].params, models[i].weight)).collect();
    weighted_average(&entries)
}

/// E-step (nearest-center assignment of the given models) followed by the
/// M-step (p_i-weighted mean of each cluster's members).
///
/// Empty clusters are repaired deterministically: the member farthest from
/// its own center, taken from a cluster with at least two members (ties to
/// the lowest client id), moves to the empty cluster and becomes its center.
/// When no cluster can donate, the old center is kept.
pub fn em_fold(models: &[ClientModel], centers: &[ParamVector]) -> Result<EmFold> {
    let mut order: Vec<usize> = (0..models.len()).collect();
    order.sort_by_key(|&i| models[i].client_id);
    let k = centers.len();
    let params: Vec<ParamVector> = models.iter().map(|m| m.params.clone()).collect();
    let mut labels = assign_by_weights(&params, centers)?;
    let objective_before = multicenter_objective(models, centers)?;

    let members_of = |labels: &[usize], c: usize| -> Vec<usize> { order.iter().copied().filter(|&i| labels[i] == c).collect() };

    let mut new_centers = centers.to_vec();
    for (c, center) in new_centers.iter_mut().enumerate() {
        let members = members_of(&labels, c);
        if !members.is_empty() {
            *center = cluster_mean(models, &members)?;
        }
    }

    for empty in 0..k {
        if !members_of(&labels, empty).is_empty() {
            continue;
        }
        let mut donor: Option<(usize, f64)> = None;
        for &i in &order {
            if members_of(&labels, labels[i]).len() < 2 {
                continue;
            }
            let d = models[i].params.sq_distance(&new_centers[labels[i]]);
            if donor.is_none_or(|(_, best)| d > best) {
                donor = Some((i, d));
            }
        }
        let Some((i, _)) = donor else { continue };
        let from = labels[i];
        labels[i] = empty;
        new_centers[empty] = models[i].params.clone();
        new_centers[from] = cluster_mean(models, &members_of(&labels, from))?;
    }

    let objective_after = order
        .iter()
        .map(|&i| models[i].weight * models[i].params.sq_distance(&new_centers[labels[i]]))
        .sum();
    let assignment = order.iter().map(|&i| (models[i].client_id, labels[i])).collect();
    Ok(EmFold { centers: new_centers, assignment, objective_before, objective_after })
}

/// Farthest-point selection of `k` initial centers among client models:
/// first the model farthest from `anchor`, then repeatedly the model
/// farthest from the anchor and all chosen ones. Missing centers (fewer models than `k`)
/// are filled with `anchor`.
pub fn farthest_point_centers(models: &[ClientModel], anchor: &ParamVector, k: usize) -> Vec<ParamVector> {
    let mut order: Vec<usize> = (0..models.len()).collect();
    order.sort_by_key(|&i| models[i].client_id);
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    let mut min_dist: Vec<f64> = order.iter().map(|&i| models[i].params.sq_distance(anchor)).collect();
    while chosen.len() < k.min(models.len()) {
        let mut best: Option<(usize, f64)> = None;
        for (pos, &i) in order.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            if best.is_none_or(|(_, d)| min_dist[pos] > d) {
                best = Some((i, min_dist[pos]));
            }
        }
        let (pick, _) = best.expect("an unchosen model remains");
        chosen.push(pick);
        for (pos, &i) in order.iter().enumerate() {
            min_dist[pos] = min_dist[pos].min(models[i].params.sq_distance(&models[pick].params));
        }
    }
    let mut centers: Vec<ParamVector> = chosen.iter().map(|&i| models[i].params.clone()).collect();
    centers.resize(k, anchor.clone());
    centers
}

/// Outcome of [`em_round`].
#[derive(Clone, Debug)]
pub struct EmRound {
    pub models: ClusterModelSet,
    pub client_params: Vec<ClientModel>,
    pub objective_before: f64,
    pub objective_after: f64,
}

/// One full-participation multi-center EM round outside the engine: every
/// client trains from its assigned center (cluster 0 if unassigned), then
/// [`em_fold`] reassigns clients and refits the centers.
pub fn em_round(
    clients: &[ClientData],
    state: &ClusterModelSet,
    spec: &ModelSpec,
    hyper: &LocalHyper,
    seed: u64,
) -> Result<EmRound> {
    let mut trained = Vec::with_capacity(clients.len());
    for c in clients {
        let k = state.assignment.get(&c.client_id).copied().unwrap_or(0);
        let start = &state.centers[k];
        let params = sgd_train(
            spec,
            start,
            c,
            hyper.steps_for(c),
            hyper.lr,
            hyper.batch_size,
            derive_seed(seed, &[tags::LOCAL, c.client_id as u64]),
        )?;
        trained.push(ClientModel { client_id: c.client_id, weight: c.weight, params });
    }
    let fold = em_fold(&trained, &state.centers)?;
    let mut assignment = state.assignment.clone();
    assignment.extend(fold.assignment);
    Ok(EmRound {
        models: ClusterModelSet::new(fold.centers, assignment)?,
        client_params: trained,
        objective_before: fold.objective_before,
        objective_after: fold.objective_after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    fn cm(id: usize, w: f64, v: &[f64]) -> ClientModel {
        ClientModel { client_id: id, weight: w, params: pv(v) }
    }

    #[test]
    fn nearest_center_and_tie_rule() {
        let centers = [pv(&[0.0, 0.0]), pv(&[10.0, 10.0])];
        assert_eq!(assign_by_weights(&[pv(&[1.0, 1.0])], &centers).unwrap(), vec![0]);
        assert_eq!(assign_by_weights(&[pv(&[5.0, 5.0])], &centers).unwrap(), vec![0]);
        assert_eq!(assign_by_weights(&[pv(&[9.0, 8.0])], &centers).unwrap(), vec![1]);
        assert!(assign_by_weights(&[pv(&[1.0, 1.0])], &[]).is_err());
    }

    #[test]
    fn em_fold_refits_weighted_means() {
        let models = [cm(0, 0.25, &[0.0]), cm(1, 0.25, &[2.0]), cm(2, 0.5, &[10.0])];
        let fold = em_fold(&models, &[pv(&[1.5]), pv(&[9.0])]).unwrap();
        assert_eq!(fold.centers, vec![pv(&[1.0]), pv(&[10.0])]);
        assert_eq!(fold.assignment.values().copied().collect::<Vec<_>>(), vec![0, 0, 1]);
        assert!(fold.objective_after <= fold.objective_before);
    }

    #[test]
    fn empty_cluster_is_repaired_from_worst_fit() {
        let models = [cm(0, 0.25, &[0.0]), cm(1, 0.25, &[1.0]), cm(2, 0.5, &[4.0])];
        // all three land on center 0 whose refit mean is 2.25; client 0 is
        // the farthest member and moves
        let fold = em_fold(&models, &[pv(&[1.0]), pv(&[100.0])]).unwrap();
        assert_eq!(fold.assignment[&0], 1);
        assert_eq!(fold.centers[1], pv(&[0.0]));
        assert!((fold.centers[0].as_slice()[0] - 3.0).abs() < 1e-12);
        assert!(fold.objective_after <= fold.objective_before);
    }

    #[test]
    fn farthest_point_picks_spread_models() {
        let models = [cm(0, 0.25, &[0.1]), cm(1, 0.25, &[-3.0]), cm(2, 0.25, &[2.9]), cm(3, 0.25, &[0.0])];
        let centers = farthest_point_centers(&models, &pv(&[0.0]), 2);
        assert_eq!(centers, vec![pv(&[-3.0]), pv(&[2.9])]);
        let padded = farthest_point_centers(&models[..1], &pv(&[0.0]), 3);
        assert_eq!(padded, vec![pv(&[0.1]), pv(&[0.0]), pv(&[0.0])]);
    }
}
