//! Dense feed-forward networks: forward pass, losses and backpropagation.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{FlError, Result};
use crate::model::{Activation, ModelSpec, ParamVector};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    CrossEntropy,
    SquaredError,
    /// `T^2 * KL(teacher_T || student_T)` where both distributions are
    /// softened by the temperature `T`.
    SoftKl { temperature: f64 },
}

impl LossKind {
    /// The loss a spec is trained with when no other objective is requested.
    pub fn natural(spec: &ModelSpec) -> Self {
        if spec.is_classifier() {
            LossKind::CrossEntropy
        } else {
            LossKind::SquaredError
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Targets<'a> {
    Labels(&'a [usize]),
    Soft(ArrayView2<'a, f64>),
    /// The input itself is the target.
    Reconstruction,
}

#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub x: ArrayView2<'a, f64>,
    pub targets: Targets<'a>,
}

impl<'a> Batch<'a> {
    pub fn labeled(x: ArrayView2<'a, f64>, y: &'a [usize]) -> Self {
        Batch { x, targets: Targets::Labels(y) }
    }

    pub fn soft(x: ArrayView2<'a, f64>, probs: ArrayView2<'a, f64>) -> Self {
        Batch { x, targets: Targets::Soft(probs) }
    }

    pub fn unlabeled(x: ArrayView2<'a, f64>) -> Self {
        Batch { x, targets: Targets::Reconstruction }
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

struct Layer<'p> {
    w: ArrayView2<'p, f64>,
    b: ArrayView1<'p, f64>,
}

fn unpack<'p>(spec: &ModelSpec, params: &'p [f64]) -> Vec<Layer<'p>> {
    spec.layers()
        .into_iter()
        .map(|l| Layer {
            w: ArrayView2::from_shape((l.fan_out, l.fan_in), &params[l.weight_range()])
                .expect("layer shape fits parameter slice"),
            b: ArrayView1::from(&params[l.bias_range()]),
        })
        .collect()
}

fn check_inputs(spec: &ModelSpec, params: &[f64], x: &ArrayView2<f64>) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(FlError::shape(format!(
            "parameter vector has {} entries, spec needs {}",
            params.len(),
            spec.param_count()
        )));
    }
    if x.ncols() != spec.input_dim() {
        return Err(FlError::shape(format!(
            "input has {} columns, model expects {}",
            x.ncols(),
            spec.input_dim()
        )));
    }
    Ok(())
}

fn activate(act: Activation, z: &mut Array2<f64>) {
    match act {
        Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
        Activation::Tanh => z.mapv_inplace(f64::tanh),
    }
}

/// Hidden activations (input included) and the final pre-activation.
fn forward_cache(spec: &ModelSpec, layers: &[Layer], x: ArrayView2<f64>) -> (Vec<Array2<f64>>, Array2<f64>) {
    let mut acts = vec![x.to_owned()];
    let last = layers.len() - 1;
    for (i, layer) in layers.iter().enumerate() {
        let mut z = acts[i].dot(&layer.w.t()) + layer.b;
        if i == last {
            return (acts, z);
        }
        activate(spec.activation, &mut z);
        acts.push(z);
    }
    unreachable!("spec has at least one layer")
}

/// Row-wise softmax of `logits / temperature`, computed stably.
pub fn softmax_rows(logits: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = logits.clone();
    for row in out.rows_mut() {
        softmax_in_place(row, temperature);
    }
    out
}

fn softmax_in_place(mut row: ndarray::ArrayViewMut1<f64>, temperature: f64) {
    row.mapv_inplace(|v| v / temperature);
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    row.mapv_inplace(|v| (v - max).exp());
    let sum = row.sum();
    row /= sum;
}

fn log_softmax_row(row: ArrayView1<f64>, temperature: f64) -> Array1<f64> {
    let scaled = row.mapv(|v| v / temperature);
    let max = scaled.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + scaled.mapv(|v| (v - max).exp()).sum().ln();
    scaled.mapv(|v| v - lse)
}

/// Teacher distribution softened by `temperature`: `softmax(ln p / T)`.
/// Zero-probability classes stay at zero.
fn temper(p: ArrayView1<f64>, temperature: f64) -> Array1<f64> {
    if temperature == 1.0 {
        return p.to_owned();
    }
    let logs = p.mapv(|v| if v > 0.0 { v.ln() / temperature } else { f64::NEG_INFINITY });
    let max = logs.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut t = logs.mapv(|v| if v.is_finite() { (v - max).exp() } else { 0.0 });
    let sum = t.sum();
    t /= sum;
    t
}

/// Forward pass. Classifiers return class-probability rows, autoencoders
/// return reconstructions with the shape of `x`.
pub fn forward(spec: &ModelSpec, params: &ParamVector, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_inputs(spec, params.as_slice(), &x)?;
    let layers = unpack(spec, params.as_slice());
    let (_, z) = forward_cache(spec, &layers, x);
    Ok(if spec.is_classifier() { softmax_rows(&z, 1.0) } else { z })
}

/// Raw output-layer values (pre-softmax for classifiers).
pub fn logits(spec: &ModelSpec, params: &ParamVector, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_inputs(spec, params.as_slice(), &x)?;
    let layers = unpack(spec, params.as_slice());
    Ok(forward_cache(spec, &layers, x).1)
}

fn validate_batch(spec: &ModelSpec, batch: &Batch, loss: LossKind) -> Result<()> {
    if batch.is_empty() {
        return Err(FlError::domain("empty batch"));
    }
    if batch.x.iter().any(|v| !v.is_finite()) {
        return Err(FlError::domain("batch contains non-finite features"));
    }
    match (loss, &batch.targets, spec.is_classifier()) {
        (LossKind::CrossEntropy, Targets::Labels(y), true) => {
            if y.len() != batch.len() {
                return Err(FlError::shape("label count differs from example count"));
            }
            let classes = spec.output_dim();
            if let Some(bad) = y.iter().find(|&&c| c >= classes) {
                return Err(FlError::domain(format!("label {bad} out of range [0, {classes})")));
            }
        }
        (LossKind::SoftKl { temperature }, Targets::Soft(p), true) => {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(FlError::domain("temperature must be positive"));
            }
            if p.dim() != (batch.len(), spec.output_dim()) {
                return Err(FlError::shape("soft targets must have one row per example and one column per class"));
            }
            if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(FlError::domain("soft targets must be non-negative"));
            }
        }
        (LossKind::SquaredError, _, false) => {}
        (loss, _, classifier) => {
            return Err(FlError::domain(format!(
                "loss {loss:?} is not defined for a {} model with these targets",
                if classifier { "classifier" } else { "reconstruction" }
            )))
        }
    }
    Ok(())
}

/// Per-example losses and the output-layer error signal for a weighted batch.
fn output_delta(
    spec: &ModelSpec,
    z: &Array2<f64>,
    batch: &Batch,
    loss: LossKind,
    weights: &[f64],
) -> (Vec<f64>, Array2<f64>) {
    let n = batch.len();
    let mut per_example = Vec::with_capacity(n);
    let mut delta = Array2::zeros(z.raw_dim());
    match (loss, &batch.targets) {
        (LossKind::CrossEntropy, Targets::Labels(y)) => {
            for (i, row) in z.rows().into_iter().enumerate() {
                let logp = log_softmax_row(row, 1.0);
                per_example.push(-logp[y[i]]);
                let mut d = delta.row_mut(i);
                d.assign(&logp.mapv(f64::exp));
                d[y[i]] -= 1.0;
                d *= weights[i];
            }
        }
        (LossKind::SoftKl { temperature: t }, Targets::Soft(p)) => {
            for (i, row) in z.rows().into_iter().enumerate() {
                let logq = log_softmax_row(row, t);
                let teacher = temper(p.row(i), t);
                let kl: f64 = teacher
                    .iter()
                    .zip(logq.iter())
                    .filter(|(&tc, _)| tc > 0.0)
                    .map(|(&tc, &lq)| tc * (tc.ln() - lq))
                    .sum();
                per_example.push((t * t * kl).max(0.0));
                let mut d = delta.row_mut(i);
                // same arithmetic as `forward`, so a model distilled on its own
                // predictions at T = 1 sees an exactly zero gradient
                d.assign(&row);
                softmax_in_place(d.view_mut(), t);
                d -= &teacher;
                d *= t * weights[i];
            }
        }
        (LossKind::SquaredError, _) => {
            let d_out = spec.output_dim() as f64;
            for (i, row) in z.rows().into_iter().enumerate() {
                let resid = &row - &batch.x.row(i);
                per_example.push(resid.mapv(|r| r * r).sum() / d_out);
                delta.row_mut(i).assign(&(resid * (2.0 * weights[i] / d_out)));
            }
        }
        _ => unreachable!("validated loss/target pairing"),
    }
    (per_example, delta)
}

/// Weighted loss `sum_e w_e * loss_e` and its gradient. `weights` defaults
/// to `1/n` for every example, i.e. the batch mean.
pub(crate) fn weighted_loss_and_grad(
    spec: &ModelSpec,
    params: &[f64],
    batch: &Batch,
    loss: LossKind,
    weights: Option<&[f64]>,
) -> Result<(f64, Vec<f64>)> {
    check_inputs(spec, params, &batch.x)?;
    validate_batch(spec, batch, loss)?;
    let n = batch.len();
    let uniform;
    let weights = match weights {
        Some(w) if w.len() == n => w,
        Some(_) => return Err(FlError::shape("example weight count differs from batch size")),
        None => {
            uniform = vec![1.0 / n as f64; n];
            &uniform
        }
    };

    let layers = unpack(spec, params);
    let (acts, z) = forward_cache(spec, &layers, batch.x);
    let (per_example, mut delta) = output_delta(spec, &z, batch, loss, weights);
    let total: f64 = per_example.iter().zip(weights).map(|(l, w)| l * w).sum();

    let shapes = spec.layers();
    let mut grad = vec![0.0; params.len()];
    for li in (0..layers.len()).rev() {
        let shape = shapes[li];
        let a_prev = &acts[li];
        let dw = delta.t().dot(a_prev);
        grad[shape.weight_range()]
            .iter_mut()
            .zip(dw.iter())
            .for_each(|(g, v)| *g = *v);
        let db = delta.sum_axis(Axis(0));
        grad[shape.bias_range()]
            .iter_mut()
            .zip(db.iter())
            .for_each(|(g, v)| *g = *v);
        if li > 0 {
            let mut da = delta.dot(&layers[li].w);
            match spec.activation {
                Activation::Relu => da.zip_mut_with(a_prev, |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0
                    }
                }),
                Activation::Tanh => da.zip_mut_with(a_prev, |d, &a| *d *= 1.0 - a * a),
            }
            delta = da;
        }
    }
    if !total.is_finite() {
        return Err(FlError::domain("loss is not finite"));
    }
    Ok((total, grad))
}

/// Mean loss over the batch and its gradient with respect to `params`.
pub fn loss_and_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    loss: LossKind,
) -> Result<(f64, ParamVector)> {
    let (l, g) = weighted_loss_and_grad(spec, params.as_slice(), batch, loss, None)?;
    Ok((l, ParamVector::new(g)?))
}

/// Loss of every example in the batch, unweighted.
pub fn per_example_loss(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    loss: LossKind,
) -> Result<Vec<f64>> {
    check_inputs(spec, params.as_slice(), &batch.x)?;
    validate_batch(spec, batch, loss)?;
    let layers = unpack(spec, params.as_slice());
    let (_, z) = forward_cache(spec, &layers, batch.x);
    let ones = vec![1.0; batch.len()];
    Ok(output_delta(spec, &z, batch, loss, &ones).0)
}

/// Mean loss only.
pub fn mean_loss(spec: &ModelSpec, params: &ParamVector, batch: &Batch, loss: LossKind) -> Result<f64> {
    let per = per_example_loss(spec, params, batch, loss)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_params_give_uniform_probabilities() {
        let spec = ModelSpec::logistic(3, 4).unwrap();
        let params = ParamVector::zeros(spec.param_count());
        let x = array![[1.0, -2.0, 0.5], [10.0, 3.0, -7.0]];
        let p = forward(&spec, &params, x.view()).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn closed_form_softmax() {
        // one input fixed at zero, biases (0, ln 3)
        let spec = ModelSpec::logistic(1, 2).unwrap();
        let params = ParamVector::new(vec![0.0, 0.0, 0.0, 3f64.ln()]).unwrap();
        let p = forward(&spec, &params, array![[0.0]].view()).unwrap();
        assert!((p[[0, 0]] - 0.25).abs() < 1e-12);
        assert!((p[[0, 1]] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn mlp_rows_normalize() {
        let spec = ModelSpec::mlp(&[4, 8, 3], Activation::Relu).unwrap();
        let params = spec.init_params(1);
        let x = Array2::from_shape_fn((5, 4), |(i, j)| (i as f64) - (j as f64) * 0.7);
        let p = forward(&spec, &params, x.view()).unwrap();
        assert_eq!(p.dim(), (5, 3));
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn autoencoder_output_matches_input_shape() {
        let spec = ModelSpec::autoencoder(&[5, 3, 5], Activation::Tanh).unwrap();
        let x = Array2::from_elem((7, 5), 0.3);
        let r = forward(&spec, &spec.init_params(0), x.view()).unwrap();
        assert_eq!(r.dim(), x.dim());
    }

    #[test]
    fn shape_errors() {
        let spec = ModelSpec::logistic(3, 2).unwrap();
        let x = Array2::zeros((2, 4));
        assert!(matches!(
            forward(&spec, &spec.init_params(0), x.view()),
            Err(FlError::Shape(_))
        ));
        let short = ParamVector::zeros(3);
        let x = Array2::zeros((2, 3));
        assert!(matches!(forward(&spec, &short, x.view()), Err(FlError::Shape(_))));
    }

    #[test]
    fn uniform_prediction_cross_entropy_is_ln_c() {
        let spec = ModelSpec::logistic(2, 5).unwrap();
        let params = ParamVector::zeros(spec.param_count());
        let x = array![[0.3, 0.1], [1.0, -1.0], [2.0, 2.0]];
        let y = [0, 4, 2];
        let (l, _) = loss_and_grad(&spec, &params, &Batch::labeled(x.view(), &y), LossKind::CrossEntropy).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn soft_kl_of_own_predictions_vanishes() {
        let spec = ModelSpec::mlp(&[3, 4, 3], Activation::Tanh).unwrap();
        let params = spec.init_params(9);
        let x = Array2::from_shape_fn((6, 3), |(i, j)| ((i * 3 + j) as f64).sin());
        let p = forward(&spec, &params, x.view()).unwrap();
        for t in [1.0, 2.0, 0.5] {
            let (l, g) = loss_and_grad(
                &spec,
                &params,
                &Batch::soft(x.view(), p.view()),
                LossKind::SoftKl { temperature: t },
            )
            .unwrap();
            assert!(l.abs() < 1e-12, "loss {l} at T={t}");
            assert!(g.norm() < 1e-12, "grad {} at T={t}", g.norm());
        }
    }

    #[test]
    fn batch_errors() {
        let spec = ModelSpec::logistic(2, 2).unwrap();
        let params = spec.init_params(0);
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(matches!(
            loss_and_grad(&spec, &params, &Batch::labeled(empty.view(), &[]), LossKind::CrossEntropy),
            Err(FlError::Domain(_))
        ));
        let x = Array2::zeros((1, 2));
        assert!(matches!(
            loss_and_grad(&spec, &params, &Batch::labeled(x.view(), &[2]), LossKind::CrossEntropy),
            Err(FlError::Domain(_))
        ));
        assert!(matches!(
            loss_and_grad(&spec, &params, &Batch::unlabeled(x.view()), LossKind::CrossEntropy),
            Err(FlError::Domain(_))
        ));
        let mut bad = Array2::zeros((1, 2));
        bad[[0, 1]] = f64::NAN;
        assert!(loss_and_grad(&spec, &params, &Batch::labeled(bad.view(), &[0]), LossKind::CrossEntropy).is_err());
    }

    #[test]
    fn temperature_one_kl_is_cross_entropy_minus_entropy() {
        let spec = ModelSpec::logistic(2, 3).unwrap();
        let params = spec.init_params(5);
        let x = array![[0.5, -1.0], [2.0, 0.1]];
        let targets = array![[0.2, 0.5, 0.3], [0.7, 0.1, 0.2]];
        let kl = per_example_loss(
            &spec,
            &params,
            &Batch::soft(x.view(), targets.view()),
            LossKind::SoftKl { temperature: 1.0 },
        )
        .unwrap();
        let q = forward(&spec, &params, x.view()).unwrap();
        for i in 0..2 {
            let ce: f64 = (0..3).map(|c| -targets[[i, c]] * q[[i, c]].ln()).sum();
            let h: f64 = (0..3).map(|c| -targets[[i, c]] * targets[[i, c]].ln()).sum();
            assert!((kl[i] - (ce - h)).abs() < 1e-9);
        }
    }
}
