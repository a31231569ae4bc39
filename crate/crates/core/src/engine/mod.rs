//! Federation orchestration: weighted aggregation, the global objective,
//! access budgets and the round loop shared by every strategy.

pub(crate) mod fedavg;
mod round;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::ClientData;
use crate::error::{FlError, Result};
use crate::model::{mean_loss, LossKind, ModelSpec, ParamVector};

pub use fedavg::FedAvg;
pub use round::{run_round, Envelope, LocalContext, LocalHyper, RoundOptions, RoundOutcome, Strategy};

/// `sum_i w_i v_i / sum_i w_i`, clamped componentwise into the inputs'
/// bounding box.
pub fn weighted_average(entries: &[(&ParamVector, f64)]) -> Result<ParamVector> {
    let (first, _) = entries.first().ok_or_else(|| FlError::domain("nothing to average"))?;
    let len = first.len();
    if entries.iter().any(|(v, _)| v.len() != len) {
        return Err(FlError::shape("cannot average parameter vectors of different lengths"));
    }
    if entries.iter().any(|&(_, w)| !(w >= 0.0 && w.is_finite())) {
        return Err(FlError::domain("aggregation weights must be finite and non-negative"));
    }
    let total: f64 = entries.iter().map(|&(_, w)| w).sum();
    if total <= 0.0 {
        return Err(FlError::domain("aggregation weights sum to zero"));
    }

    let mut out = vec![0.0; len];
    let mut lo = first.as_slice().to_vec();
    let mut hi = lo.clone();
    for &(v, w) in entries {
        let share = w / total;
        for (j, &x) in v.as_slice().iter().enumerate() {
            out[j] += share * x;
            lo[j] = lo[j].min(x);
            hi[j] = hi[j].max(x);
        }
    }
    for j in 0..len {
        out[j] = out[j].clamp(lo[j], hi[j]);
    }
    ParamVector::new(out)
}

/// Global objective `sum_i p_i L(D_i, W)` with the natural loss of `spec`.
pub fn global_loss(clients: &[ClientData], spec: &ModelSpec, params: &ParamVector) -> Result<f64> {
    let mass: f64 = clients.iter().map(|c| c.weight).sum();
    if (mass - 1.0).abs() > 1e-9 {
        return Err(FlError::domain(format!("client weights sum to {mass}, expected 1")));
    }
    params.check_spec(spec)?;
    let loss = LossKind::natural(spec);
    let mut total = 0.0;
    for c in clients {
        total += c.weight * mean_loss(spec, params, &c.batch(loss), loss)?;
    }
    Ok(total)
}

/// Pay-per-access meter: one access is one round of participation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessBudget {
    pub max_accesses: usize,
    pub used: usize,
}

impl AccessBudget {
    pub fn new(max_accesses: usize) -> Self {
        AccessBudget { max_accesses, used: 0 }
    }

    pub fn unlimited() -> Self {
        AccessBudget::new(usize::MAX)
    }

    pub fn remaining(&self) -> usize {
        self.max_accesses - self.used
    }

    pub fn is_exhausted(&self) -> bool {
        self.used >= self.max_accesses
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationState {
    pub round: usize,
    pub global_params: Vec<ParamVector>,
    pub assignments: BTreeMap<usize, usize>,
    pub personal_params: BTreeMap<usize, ParamVector>,
    pub budgets: BTreeMap<usize, AccessBudget>,
    pub rng_seed: u64,
}

impl FederationState {
    /// Fresh state with every client given the same budget (`None` = unlimited).
    pub fn new(
        global_params: Vec<ParamVector>,
        client_ids: impl IntoIterator<Item = usize>,
        max_accesses: Option<usize>,
        rng_seed: u64,
    ) -> Self {
        let budget = max_accesses.map_or_else(AccessBudget::unlimited, AccessBudget::new);
        FederationState {
            round: 0,
            global_params,
            assignments: BTreeMap::new(),
            personal_params: BTreeMap::new(),
            budgets: client_ids.into_iter().map(|id| (id, budget)).collect(),
            rng_seed,
        }
    }

    /// Clients that may still be selected, ascending by id.
    pub fn eligible_clients(&self) -> Vec<usize> {
        self.budgets.iter().filter(|(_, b)| !b.is_exhausted()).map(|(&id, _)| id).collect()
    }

    pub fn charge_access(&mut self, client_id: usize) -> Result<()> {
        let budget = self
            .budgets
            .get_mut(&client_id)
            .ok_or_else(|| FlError::domain(format!("no access budget for client {client_id}")))?;
        if budget.is_exhausted() {
            return Err(FlError::BudgetExhausted { client_id, max: budget.max_accesses });
        }
        budget.used += 1;
        Ok(())
    }

    pub fn check_invariants(&self) -> Result<()> {
        if let Some((id, b)) = self.budgets.iter().find(|(_, b)| b.used > b.max_accesses) {
            return Err(FlError::ContractViolation(format!(
                "client {id} charged {} times against a budget of {}",
                b.used, b.max_accesses
            )));
        }
        if let Some((id, k)) = self.assignments.iter().find(|(_, &k)| k >= self.global_params.len()) {
            return Err(FlError::ContractViolation(format!(
                "client {id} assigned to model {k} but only {} global models exist",
                self.global_params.len()
            )));
        }
        Ok(())
    }
}

/// Per-round metrics, emitted as one JSON object per line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub global_loss: f64,
    pub per_client_loss: BTreeMap<usize, f64>,
    pub per_client_accuracy: BTreeMap<usize, f64>,
    pub accesses_charged: usize,
    pub participants: Vec<usize>,
}

impl RoundRecord {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// `sum_i p_i * per_client_loss[i]` in ascending client order.
    pub fn recompute_global_loss(&self, clients: &[ClientData]) -> f64 {
        let mut sorted: Vec<&ClientData> = clients.iter().collect();
        sorted.sort_by_key(|c| c.client_id);
        sorted
            .iter()
            .filter_map(|c| self.per_client_loss.get(&c.client_id).map(|l| c.weight * l))
            .sum()
    }
}
