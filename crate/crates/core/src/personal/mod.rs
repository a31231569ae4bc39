//! Per-client personalization on top of a shared global model: global/local
//! mixtures, proximal-regularized personal models, one-step meta
//! personalization, plain fine-tuning and data interpolation.

mod strategies;

use ndarray::{concatenate, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{ClientData, PublicSet};
use crate::error::{FlError, Result};
use crate::model::{
    sgd_minimize, sgd_minimize_with, sgd_train, weighted_loss_and_grad, Batch, LossKind, ModelObjective,
    ModelSpec, Objective, ParamVector, SgdConfig,
};

pub use strategies::{Mixture, OneStep, Proximal};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationHyper {
    /// Mixing weight (mixture) or proximal strength.
    pub lambda: f64,
    /// Inner step size of the one-step meta objective.
    pub alpha: f64,
    /// Local steps spent on the personal model.
    pub local_steps: usize,
}

impl Default for PersonalizationHyper {
    fn default() -> Self {
        PersonalizationHyper { lambda: 0.5, alpha: 1.0, local_steps: 20 }
    }
}

impl PersonalizationHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(FlError::domain("lambda must be non-negative"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(FlError::domain("alpha must be positive"));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(FlError::domain("lambda must be non-negative"))
    }
}

/// `L(D_i, W) + lambda * L(D_i, W_i)` and its partials in `W` and `W_i`.
pub fn mixture_objective_grad(
    client: &ClientData,
    spec: &ModelSpec,
    global: &ParamVector,
    personal: &ParamVector,
    lambda: f64,
) -> Result<(f64, ParamVector, ParamVector)> {
    check_lambda(lambda)?;
    global.check_spec(spec)?;
    personal.check_spec(spec)?;
    let obj = ModelObjective::new(spec, client);
    let (lg, gg) = obj.full_loss_and_grad(global.as_slice())?;
    if lambda == 0.0 {
        return Ok((lg, ParamVector::new(gg)?, ParamVector::zeros(personal.len())));
    }
    let (lp, gp) = obj.full_loss_and_grad(personal.as_slice())?;
    let gp: Vec<f64> = gp.into_iter().map(|g| lambda * g).collect();
    Ok((lg + lambda * lp, ParamVector::new(gg)?, ParamVector::new(gp)?))
}

/// The mixture objective over the stacked vector `[W; W_i]`.
pub(crate) struct MixtureObjective<'a> {
    pub inner: ModelObjective<'a>,
    pub lambda: f64,
}

impl Objective for MixtureObjective<'_> {
    fn num_examples(&self) -> usize {
        self.inner.num_examples()
    }

    fn dim(&self) -> usize {
        2 * self.inner.dim()
    }

    fn loss_and_grad(&self, params: &[f64], indices: &[usize]) -> Result<(f64, Vec<f64>)> {
        let d = self.inner.dim();
        let (lg, mut grad) = self.inner.loss_and_grad(&params[..d], indices)?;
        if self.lambda == 0.0 {
            grad.resize(2 * d, 0.0);
            return Ok((lg, grad));
        }
        let (lp, gp) = self.inner.loss_and_grad(&params[d..], indices)?;
        grad.extend(gp.into_iter().map(|g| self.lambda * g));
        Ok((lg + self.lambda * lp, grad))
    }
}

/// Joint SGD on the mixture objective; returns the updated `(W, W_i)`.
pub fn mixture_train(
    client: &ClientData,
    spec: &ModelSpec,
    global: &ParamVector,
    personal: &ParamVector,
    lambda: f64,
    cfg: &SgdConfig,
) -> Result<(ParamVector, ParamVector)> {
    check_lambda(lambda)?;
    global.check_spec(spec)?;
    personal.check_spec(spec)?;
    let obj = MixtureObjective { inner: ModelObjective::new(spec, client), lambda };
    let mut init = global.as_slice().to_vec();
    init.extend_from_slice(personal.as_slice());
    let mut out = sgd_minimize(&obj, init, cfg)?;
    let p = out.split_off(spec.param_count());
    Ok((ParamVector::new(out)?, ParamVector::new(p)?))
}

/// SGD on `obj + (lambda/2) ||w - anchor||^2` starting from `anchor`. The
/// penalty is applied through its exact proximal map,
/// `w <- (w - lr*g + lr*lambda*anchor) / (1 + lr*lambda)`, which stays
/// stable for arbitrarily large `lambda`.
pub fn proximal_minimize<O: Objective + ?Sized>(
    obj: &O,
    anchor: &[f64],
    lambda: f64,
    cfg: &SgdConfig,
) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    if lambda == 0.0 {
        return sgd_minimize(obj, anchor.to_vec(), cfg);
    }
    let lr = cfg.lr;
    let shrink = 1.0 + lr * lambda;
    sgd_minimize_with(obj, anchor.to_vec(), cfg, |w, g| {
        for ((w, g), a) in w.iter_mut().zip(g).zip(anchor) {
            *w = (*w - lr * g + lr * lambda * a) / shrink;
        }
    })
}

/// Personal model regularized toward the global model `W`.
#[allow(clippy::too_many_arguments)]
pub fn proximal_personalize(
    client: &ClientData,
    spec: &ModelSpec,
    global: &ParamVector,
    lambda: f64,
    lr: f64,
    steps: usize,
    batch_size: usize,
    seed: u64,
) -> Result<ParamVector> {
    global.check_spec(spec)?;
    let cfg = SgdConfig { steps, lr, batch_size, seed };
    let out = proximal_minimize(&ModelObjective::new(spec, client), global.as_slice(), lambda, &cfg)?;
    ParamVector::new(out)
}

/// Plain local fine-tuning of the global model.
pub fn finetune_baseline(
    client: &ClientData,
    spec: &ModelSpec,
    global: &ParamVector,
    lr: f64,
    steps: usize,
    batch_size: usize,
    seed: u64,
) -> Result<ParamVector> {
    sgd_train(spec, global, client, steps, lr, batch_size, seed)
}

/// Relative size of the finite-difference probe used for Hessian-vector
/// products.
const HVP_PROBE: f64 = 1e-5;

/// Meta loss `L(W - alpha * grad L(W))` on the given examples and its
/// gradient `(I - alpha H(W)) grad L(W')`. The Hessian-vector product is a
/// central difference of gradients along `grad L(W')`.
pub fn meta_loss_grad<O: Objective + ?Sized>(
    obj: &O,
    params: &[f64],
    alpha: f64,
    indices: &[usize],
) -> Result<(f64, Vec<f64>)> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(FlError::domain("alpha must be positive"));
    }
    let (_, g) = obj.loss_and_grad(params, indices)?;
    let inner: Vec<f64> = params.iter().zip(&g).map(|(w, g)| w - alpha * g).collect();
    let (loss, outer) = obj.loss_and_grad(&inner, indices)?;
    let norm = outer.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok((loss, outer));
    }
    let eps = HVP_PROBE / norm;
    let plus: Vec<f64> = params.iter().zip(&outer).map(|(w, v)| w + eps * v).collect();
    let minus: Vec<f64> = params.iter().zip(&outer).map(|(w, v)| w - eps * v).collect();
    let (_, gp) = obj.loss_and_grad(&plus, indices)?;
    let (_, gm) = obj.loss_and_grad(&minus, indices)?;
    let grad = outer
        .iter()
        .zip(gp.iter().zip(&gm))
        .map(|(v, (p, m))| v - alpha * (p - m) / (2.0 * eps))
        .collect();
    Ok((loss, grad))
}

/// The one-step meta objective on a client's full dataset.
pub fn one_step_meta_loss_grad(
    client: &ClientData,
    spec: &ModelSpec,
    params: &ParamVector,
    alpha: f64,
) -> Result<(f64, ParamVector)> {
    params.check_spec(spec)?;
    let obj = ModelObjective::new(spec, client);
    let all: Vec<usize> = (0..client.len()).collect();
    let (l, g) = meta_loss_grad(&obj, params.as_slice(), alpha, &all)?;
    Ok((l, ParamVector::new(g)?))
}

/// Deploy-time personalization: one full-batch gradient step of size `alpha`.
pub fn one_step_adapt(client: &ClientData, spec: &ModelSpec, params: &ParamVector, alpha: f64) -> Result<ParamVector> {
    let obj = ModelObjective::new(spec, client);
    let (_, g) = obj.full_loss_and_grad(params.as_slice())?;
    ParamVector::new(params.as_slice().iter().zip(&g).map(|(w, g)| w - alpha * g).collect())
}

pub(crate) struct MetaObjective<'a> {
    pub inner: ModelObjective<'a>,
    pub alpha: f64,
}

impl Objective for MetaObjective<'_> {
    fn num_examples(&self) -> usize {
        self.inner.num_examples()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn loss_and_grad(&self, params: &[f64], indices: &[usize]) -> Result<(f64, Vec<f64>)> {
        meta_loss_grad(&self.inner, params, self.alpha, indices)
    }
}

/// Pooled client and public examples; each pool contributes in proportion
/// to its weight (`1` for the client, `lambda` for the public rows).
struct InterpolatedPool<'a> {
    spec: &'a ModelSpec,
    x: ndarray::Array2<f64>,
    y: Vec<usize>,
    weights: Vec<f64>,
}

impl Objective for InterpolatedPool<'_> {
    fn num_examples(&self) -> usize {
        self.y.len()
    }

    fn dim(&self) -> usize {
        self.spec.param_count()
    }

    fn loss_and_grad(&self, params: &[f64], indices: &[usize]) -> Result<(f64, Vec<f64>)> {
        let total: f64 = indices.iter().map(|&i| self.weights[i]).sum();
        if total <= 0.0 {
            return Ok((0.0, vec![0.0; self.dim()]));
        }
        let x = self.x.select(Axis(0), indices);
        let y: Vec<usize> = indices.iter().map(|&i| self.y[i]).collect();
        let w: Vec<f64> = indices.iter().map(|&i| self.weights[i] / total).collect();
        weighted_loss_and_grad(self.spec, params, &Batch::labeled(x.view(), &y), LossKind::CrossEntropy, Some(&w))
    }
}

/// Data interpolation: trains on the client's rows pooled with the labeled
/// public rows, the public pool weighted `lambda` relative to the client's.
#[allow(clippy::too_many_arguments)]
pub fn data_interpolation_train(
    client: &ClientData,
    public: &PublicSet,
    spec: &ModelSpec,
    init: &ParamVector,
    lambda: f64,
    cfg: &SgdConfig,
) -> Result<ParamVector> {
    check_lambda(lambda)?;
    init.check_spec(spec)?;
    if !spec.is_classifier() {
        return Err(FlError::domain("data interpolation needs a classifier"));
    }
    let x = concatenate(Axis(0), &[client.x.view(), public.x.view()])
        .map_err(|_| FlError::shape("public rows do not match client feature count"))?;
    let mut y = client.y.clone();
    y.extend_from_slice(&public.labels);
    let n_c = client.len() as f64;
    let n_p = public.labels.len() as f64;
    let mut weights = vec![1.0 / n_c; client.len()];
    weights.extend(std::iter::repeat_n(lambda / n_p, public.labels.len()));
    let pool = InterpolatedPool { spec, x, y, weights };
    ParamVector::new(sgd_minimize(&pool, init.as_slice().to_vec(), cfg)?)
}
