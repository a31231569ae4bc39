//! Federation across heterogeneous architectures by exchanging predictions
//! on a shared public set, plus the single-round ensemble protocol.

mod oneshot;
mod strategy;

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::ClientData;
use crate::error::{FlError, Result};
use crate::model::{forward, sgd_minimize, weighted_loss_and_grad, Batch, LossKind, ModelSpec, Objective, ParamVector, SgdConfig};

pub use oneshot::{one_shot_ensemble, select_ensemble, EnsembleModel, OneShotOutcome};
pub use strategy::Distill;

/// `model_id` used for coordinator-side averages.
pub const CONSENSUS_MODEL_ID: usize = usize::MAX;

const ROW_TOLERANCE: f64 = 1e-9;

/// Class probabilities of one model on every public example.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMatrix {
    pub rows: Array2<f64>,
    pub model_id: usize,
    pub round: usize,
}

impl PredictionMatrix {
    pub fn new(rows: Array2<f64>, model_id: usize, round: usize) -> Result<Self> {
        for (i, row) in rows.rows().into_iter().enumerate() {
            if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(FlError::domain(format!("prediction row {i} has an invalid probability")));
            }
            let s = row.sum();
            if (s - 1.0).abs() > ROW_TOLERANCE {
                return Err(FlError::domain(format!("prediction row {i} sums to {s}")));
            }
        }
        Ok(PredictionMatrix { rows, model_id, round })
    }

    pub fn num_examples(&self) -> usize {
        self.rows.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.rows.ncols()
    }
}

/// Per-client architectures. Every entry is a classifier over the same
/// input dimension and class count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeteroModelRegistry {
    specs: BTreeMap<usize, ModelSpec>,
}

impl HeteroModelRegistry {
    pub fn new(specs: BTreeMap<usize, ModelSpec>) -> Result<Self> {
        let first = specs.values().next().ok_or_else(|| FlError::config("model registry is empty"))?;
        let (d, c) = (first.input_dim(), first.output_dim());
        for (id, s) in &specs {
            s.validate()?;
            if !s.is_classifier() {
                return Err(FlError::config(format!("client {id}: distillation needs a classifier")));
            }
            if s.input_dim() != d || s.output_dim() != c {
                return Err(FlError::config(format!(
                    "client {id}: model maps {} -> {}, registry uses {d} -> {c}",
                    s.input_dim(),
                    s.output_dim()
                )));
            }
        }
        Ok(HeteroModelRegistry { specs })
    }

    /// The same architecture for every listed client.
    pub fn uniform(spec: &ModelSpec, client_ids: impl IntoIterator<Item = usize>) -> Result<Self> {
        HeteroModelRegistry::new(client_ids.into_iter().map(|id| (id, spec.clone())).collect())
    }

    pub fn get(&self, client_id: usize) -> Result<&ModelSpec> {
        self.specs
            .get(&client_id)
            .ok_or_else(|| FlError::config(format!("no model registered for client {client_id}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &ModelSpec)> {
        self.specs.iter().map(|(&id, s)| (id, s))
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.specs.values().next().map_or(0, ModelSpec::input_dim)
    }

    pub fn num_classes(&self) -> usize {
        self.specs.values().next().map_or(0, ModelSpec::output_dim)
    }
}

pub fn public_predictions(
    spec: &ModelSpec,
    params: &ParamVector,
    public_x: ArrayView2<f64>,
    model_id: usize,
    round: usize,
) -> Result<PredictionMatrix> {
    if !spec.is_classifier() {
        return Err(FlError::domain("public predictions need a classifier"));
    }
    Ok(PredictionMatrix { rows: forward(spec, params, public_x)?, model_id, round })
}

/// Row-wise weighted mean. Rows are renormalized only when rounding pushed
/// their sum off 1.
pub fn average_predictions(mats: &[&PredictionMatrix], weights: &[f64]) -> Result<PredictionMatrix> {
    let first = mats.first().ok_or_else(|| FlError::domain("no prediction matrices to average"))?;
    if mats.len() != weights.len() {
        return Err(FlError::shape("one weight per prediction matrix is required"));
    }
    if mats.iter().any(|m| m.rows.dim() != first.rows.dim()) {
        return Err(FlError::shape("prediction matrices differ in shape"));
    }
    if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(FlError::domain("averaging weights must be positive"));
    }
    let total: f64 = weights.iter().sum();
    let mut rows = Array2::zeros(first.rows.raw_dim());
    let mut lo = first.rows.clone();
    let mut hi = first.rows.clone();
    for (m, &w) in mats.iter().zip(weights) {
        rows.scaled_add(w / total, &m.rows);
        lo.zip_mut_with(&m.rows, |a, &b| *a = a.min(b));
        hi.zip_mut_with(&m.rows, |a, &b| *a = a.max(b));
    }
    // keep each cell inside the inputs' range so identical inputs come back exactly
    ndarray::Zip::from(&mut rows).and(&lo).and(&hi).for_each(|v, &l, &h| *v = v.clamp(l, h));
    for mut row in rows.rows_mut() {
        let s = row.sum();
        if (s - 1.0).abs() > ROW_TOLERANCE {
            row /= s;
        }
    }
    Ok(PredictionMatrix { rows, model_id: CONSENSUS_MODEL_ID, round: first.round })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillHyper {
    /// Weight of the private cross-entropy term.
    pub lambda: f64,
    pub temperature: f64,
    /// Exclude a client's own predictions from the consensus it learns from.
    pub leave_one_out: bool,
}

impl Default for DistillHyper {
    fn default() -> Self {
        DistillHyper { lambda: 1.0, temperature: 2.0, leave_one_out: true }
    }
}

impl DistillHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(FlError::domain("lambda must be non-negative"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(FlError::domain("temperature must be positive"));
        }
        Ok(())
    }
}

/// `L_soft(public, consensus) + lambda * L_ce(private)` over the stacked
/// index space: public rows first, then private rows. A minibatch is scaled
/// so its loss is an unbiased estimate of the full objective.
struct DistillObjective<'a> {
    spec: &'a ModelSpec,
    public_x: ArrayView2<'a, f64>,
    consensus: ArrayView2<'a, f64>,
    private: &'a ClientData,
    lambda: f64,
    temperature: f64,
}

impl<'a> DistillObjective<'a> {
    fn new(
        spec: &'a ModelSpec,
        public_x: ArrayView2<'a, f64>,
        consensus: &'a PredictionMatrix,
        private: &'a ClientData,
        lambda: f64,
        temperature: f64,
    ) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(FlError::domain("lambda must be non-negative"));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(FlError::domain("temperature must be positive"));
        }
        if consensus.num_examples() != public_x.nrows() {
            return Err(FlError::shape("consensus rows do not match the public set"));
        }
        if public_x.nrows() == 0 {
            return Err(FlError::domain("public set is empty"));
        }
        Ok(DistillObjective { spec, public_x, consensus: consensus.rows.view(), private, lambda, temperature })
    }
}

impl Objective for DistillObjective<'_> {
    fn num_examples(&self) -> usize {
        self.public_x.nrows() + self.private.len()
    }

    fn dim(&self) -> usize {
        self.spec.param_count()
    }

    fn loss_and_grad(&self, params: &[f64], indices: &[usize]) -> Result<(f64, Vec<f64>)> {
        let n_pub = self.public_x.nrows();
        let scale = self.num_examples() as f64 / indices.len() as f64;
        let (public, private): (Vec<usize>, Vec<usize>) = indices.iter().partition(|&&i| i < n_pub);
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.dim()];
        if !public.is_empty() {
            let x = self.public_x.select(Axis(0), &public);
            let p = self.consensus.select(Axis(0), &public);
            let w = vec![scale / n_pub as f64; public.len()];
            let kind = LossKind::SoftKl { temperature: self.temperature };
            let (l, g) = weighted_loss_and_grad(self.spec, params, &Batch::soft(x.view(), p.view()), kind, Some(&w))?;
            loss += l;
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        if self.lambda > 0.0 && !private.is_empty() {
            let rows: Vec<usize> = private.iter().map(|i| i - n_pub).collect();
            let x = self.private.x.select(Axis(0), &rows);
            let y: Vec<usize> = rows.iter().map(|&i| self.private.y[i]).collect();
            let w = vec![scale * self.lambda / self.private.len() as f64; rows.len()];
            let (l, g) =
                weighted_loss_and_grad(self.spec, params, &Batch::labeled(x.view(), &y), LossKind::CrossEntropy, Some(&w))?;
            loss += l;
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        Ok((loss, grad))
    }
}

/// Full-batch distillation objective and its gradient.
pub fn distill_loss_and_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    public_x: ArrayView2<f64>,
    consensus: &PredictionMatrix,
    private: &ClientData,
    lambda: f64,
    temperature: f64,
) -> Result<(f64, ParamVector)> {
    params.check_spec(spec)?;
    let obj = DistillObjective::new(spec, public_x, consensus, private, lambda, temperature)?;
    let (l, g) = obj.full_loss_and_grad(params.as_slice())?;
    Ok((l, ParamVector::new(g)?))
}

/// SGD on the distillation objective. Minibatches are drawn from the
/// public and private rows together.
#[allow(clippy::too_many_arguments)]
pub fn distill_update(
    spec: &ModelSpec,
    params: &ParamVector,
    public_x: ArrayView2<f64>,
    consensus: &PredictionMatrix,
    private: &ClientData,
    hyper: &DistillHyper,
    cfg: &SgdConfig,
) -> Result<ParamVector> {
    params.check_spec(spec)?;
    let obj = DistillObjective::new(spec, public_x, consensus, private, hyper.lambda, hyper.temperature)?;
    ParamVector::new(sgd_minimize(&obj, params.as_slice().to_vec(), cfg)?)
}

/// Writes `round, model_id, example_index, p0..p{C-1}` rows.
pub fn write_predictions_csv<W: Write>(mats: &[PredictionMatrix], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let classes = mats.first().map_or(0, PredictionMatrix::num_classes);
    let mut header = vec!["round".to_string(), "model_id".to_string(), "example_index".to_string()];
    header.extend((0..classes).map(|c| format!("p{c}")));
    w.write_record(&header)?;
    for m in mats {
        for (i, row) in m.rows.rows().into_iter().enumerate() {
            let mut rec = vec![m.round.to_string(), m.model_id.to_string(), i.to_string()];
            rec.extend(row.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;
    use ndarray::array;

    fn pm(rows: Array2<f64>) -> PredictionMatrix {
        PredictionMatrix::new(rows, 0, 0).unwrap()
    }

    #[test]
    fn zero_logistic_predicts_uniform() {
        let spec = ModelSpec::logistic(2, 4).unwrap();
        let x = array![[1.0, 2.0], [-3.0, 0.5]];
        let p = public_predictions(&spec, &ParamVector::zeros(spec.param_count()), x.view(), 0, 0).unwrap();
        assert!(p.rows.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn averaging_cases() {
        let a = pm(array![[1.0, 0.0], [0.3, 0.7]]);
        let b = pm(array![[0.0, 1.0], [0.3, 0.7]]);
        let avg = average_predictions(&[&a, &b], &[1.0, 1.0]).unwrap();
        assert_eq!(avg.rows, array![[0.5, 0.5], [0.3, 0.7]]);
        assert_eq!(avg.model_id, CONSENSUS_MODEL_ID);
        assert_eq!(average_predictions(&[&a, &a], &[0.2, 5.0]).unwrap().rows, a.rows);
        let c = pm(array![[1.0, 0.0]]);
        assert!(matches!(average_predictions(&[&a, &c], &[1.0, 1.0]), Err(FlError::Shape(_))));
        assert!(average_predictions(&[&a], &[0.0]).is_err());
    }

    #[test]
    fn rejects_non_stochastic_rows() {
        assert!(PredictionMatrix::new(array![[0.5, 0.6]], 0, 0).is_err());
        assert!(PredictionMatrix::new(array![[1.5, -0.5]], 0, 0).is_err());
    }

    #[test]
    fn registry_checks_shared_shapes() {
        let mut m = BTreeMap::new();
        m.insert(0, ModelSpec::logistic(3, 2).unwrap());
        m.insert(1, ModelSpec::mlp(&[3, 8, 2], Activation::Relu).unwrap());
        assert!(HeteroModelRegistry::new(m.clone()).is_ok());
        m.insert(2, ModelSpec::logistic(4, 2).unwrap());
        assert!(HeteroModelRegistry::new(m).is_err());
        assert!(HeteroModelRegistry::new(BTreeMap::new()).is_err());
    }

    #[test]
    fn self_consensus_without_private_term_is_stationary() {
        let spec = ModelSpec::mlp(&[2, 4, 3], Activation::Tanh).unwrap();
        let params = spec.init_params(4);
        let x = array![[0.5, -1.0], [2.0, 0.1], [-0.3, 0.3]];
        let own = public_predictions(&spec, &params, x.view(), 0, 0).unwrap();
        let private = ClientData::new(0, array![[1.0, 1.0]], vec![2], 1.0).unwrap();
        for t in [0.5, 1.0, 2.0, 5.0] {
            let (l, g) = distill_loss_and_grad(&spec, &params, x.view(), &own, &private, 0.0, t).unwrap();
            assert!(l.abs() < 1e-12);
            assert!(g.norm() < 1e-12);
        }
        let (_, g) = distill_loss_and_grad(&spec, &params, x.view(), &own, &private, 0.0, 1.0).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn predictions_csv_layout() {
        let a = PredictionMatrix::new(array![[0.25, 0.75]], 3, 1).unwrap();
        let mut buf = Vec::new();
        write_predictions_csv(&[a], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "round,model_id,example_index,p0,p1\n1,3,0,0.25,0.75\n");
    }
}
